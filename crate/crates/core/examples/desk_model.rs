//! Encrypted inference on a 16x16 model with 4 filters against the
//! plaintext forward pass, on both backends.
//!
//! cargo run --release --example desk_model -- 64

use std::time::Instant;

use hecnn::executor::{run_inference, ThreadPlan};
use hecnn::layers::PolyActivation;
use hecnn::model::{encrypt_model, Manifest};
use hecnn::packing::{pack_batch_secret, unpack_batch};
use hecnn::{dataset, derive_params, plaintext_forward, CkksBackend, HeBackend, ImageBatch, ModelDesc, RefBackend};

fn run<B: HeBackend>(model: &ModelDesc, images: &ImageBatch, want: &[Vec<f64>]) -> hecnn::Result<()> {
    let t = Instant::now();
    let b = B::new(derive_params(1 << 14, 240, 35, 1)?)?;
    let k = b.keygen()?;
    let em = encrypt_model(&b, &k.public, model, 2)?;
    let x = pack_batch_secret(&b, &k.secret, images, 3)?;
    let setup = t.elapsed().as_secs_f64();
    let plan = ThreadPlan::default_for(&em.topology, rayon::current_num_threads());
    let run = run_inference(&b, &k.eval, &em, &x, plan)?;
    let got = unpack_batch(&b, &k.secret, &run.logits)?;
    let err = got
        .iter()
        .flatten()
        .zip(want.iter().flatten())
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    println!(
        "{:<5} setup {setup:.1}s, inference {:.1}s ({:.1} ms/image), max |err| {err:.2e}",
        B::KIND.name(),
        run.report.total_s,
        run.report.amortized_ms()
    );
    Ok(())
}

fn main() -> hecnn::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let manifest = Manifest::canonical(16, 16, 4, 3, 10, true, false, PolyActivation::default());
    let model = ModelDesc::random(&manifest, 2024)?;
    let images = dataset::random_images(16, 16, batch, 7);
    let want = plaintext_forward(&model, &images)?;
    run::<RefBackend>(&model, &images, &want)?;
    run::<CkksBackend>(&model, &images, &want)
}
