//! Writes a random model directory (model.json + weights.bin) and a matching
//! image file for trying the CLI.
//!
//! cargo run --example make_model -- OUT_DIR [rows filters classes images]

use std::path::PathBuf;

use hecnn::dataset::{random_images, save_images};
use hecnn::layers::PolyActivation;
use hecnn::model::{save_model, Manifest};
use hecnn::ModelDesc;

fn main() -> hecnn::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("desk", String::as_str));
    let num = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (rows, filters, classes, n) = (num(1, 16), num(2, 4), num(3, 10), num(4, 64));
    let manifest = Manifest::canonical(rows, rows, filters, 3, classes, true, false, PolyActivation::default());
    save_model(&ModelDesc::random(&manifest, 1)?, &out.join("model"))?;
    save_images(&out.join("images.bin"), &random_images(rows, rows, n, 2))?;
    println!("wrote {}/model and {}/images.bin", out.display(), out.display());
    Ok(())
}
