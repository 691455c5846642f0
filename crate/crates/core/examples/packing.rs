//! SIMD packing: one ciphertext per pixel position, one slot per image.
//!
//! cargo run --release --example packing

use hecnn::dataset::random_images;
use hecnn::packing::{pack_batch_secret, unpack_batch};
use hecnn::{derive_params, CkksBackend, HeBackend};

fn main() -> hecnn::Result<()> {
    let b = CkksBackend::new(derive_params(1 << 13, 200, 35, 1)?)?;
    let k = b.keygen()?;
    let images = random_images(4, 4, b.slots(), 2);
    let cm = pack_batch_secret(&b, &k.secret, &images, 3)?;
    let back = unpack_batch(&b, &k.secret, &cm)?;
    let err = back
        .iter()
        .flatten()
        .zip(images.images.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!(
        "{} images of {}x{} in {} ciphertexts ({} KiB), max |err| {err:.2e}",
        images.len(),
        images.rows,
        images.cols,
        cm.cells.len(),
        cm.byte_size() / 1024
    );
    Ok(())
}
