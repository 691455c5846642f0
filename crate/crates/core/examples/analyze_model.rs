//! Depth, operation counts and parameter advice for the 28x28 MNIST CNN, or
//! for a model directory given on the command line.
//!
//! cargo run --example analyze_model -- [MODEL_DIR]

use hecnn::analyzer::analyze;
use hecnn::model::{load_manifest, Manifest};
use hecnn::{derive_params, layers::PoolMode};

fn main() -> hecnn::Result<()> {
    let manifest = match std::env::args().nth(1) {
        Some(dir) => load_manifest(dir.as_ref())?,
        None => Manifest::mnist_cnn(),
    };
    let params = derive_params(1 << 16, 600, 35, 0)?;
    let report = analyze(&manifest, &params)?;
    println!("{report}");
    print!("{}", report.to_csv());

    let mut folded = manifest.clone();
    for l in &mut folded.layers {
        if let hecnn::model::LayerSpec::Actpool { pool_mode, .. } = l {
            *pool_mode = PoolMode::Folded;
        }
    }
    let f = analyze(&folded, &params)?;
    println!(
        "\nwith the 1/4 pooling factor folded into the activation: depth {}, L = {}",
        f.deepest_path_levels, f.recommended_l
    );
    Ok(())
}
