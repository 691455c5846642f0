//! File-based workflow between the end user, the model owner and the server,
//! each step touching only the artifacts that party would hold.
//!
//! cargo run --release --example three_party

use std::fs;

use hecnn::backend::BackendKind;
use hecnn::layers::PolyActivation;
use hecnn::model::Manifest;
use hecnn::{dataset, derive_params, plaintext_forward, workflow, ModelDesc};

fn main() -> hecnn::Result<()> {
    let root = std::env::temp_dir().join(format!("hecnn-three-party-{}", std::process::id()));
    let (user, server) = (root.join("user"), root.join("server"));

    // End user: keys and encrypted images.
    let params = derive_params(1 << 12, 240, 35, 42)?;
    workflow::keygen(BackendKind::Ckks, params, &user, true)?;
    let images = dataset::random_images(8, 8, 16, 1);
    workflow::encrypt_input_file(&user, &images, &root.join("input.enc"), 2)?;

    // Model owner: weights under the user's public key.
    let model = ModelDesc::random(&Manifest::canonical(8, 8, 3, 3, 4, true, true, PolyActivation::default()), 3)?;
    let n = workflow::encrypt_model_file(&user, &model, &root.join("model.enc"), 4)?;

    // Server: evaluation key only.
    fs::create_dir_all(&server)?;
    for f in [workflow::PARAMS_FILE, workflow::EVAL_KEY_FILE] {
        fs::copy(user.join(f), server.join(f))?;
    }
    let report = workflow::infer_file(&server, &root.join("model.enc"), &root.join("input.enc"), &root.join("out.enc"), None, 1)?;

    // End user again.
    let logits = workflow::decrypt_output_file(&user, &root.join("out.enc"))?;
    let want = plaintext_forward(&model, &images)?;
    let err = logits
        .iter()
        .flatten()
        .zip(want.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("{n} weight ciphertexts, plan {}, {:.2}s", report.plan, report.total_s);
    println!("predictions {:?}", workflow::predict_file(&user, &root.join("out.enc"))?);
    println!("max |err| against the plaintext model {err:.2e}");
    fs::remove_dir_all(&root)?;
    Ok(())
}
