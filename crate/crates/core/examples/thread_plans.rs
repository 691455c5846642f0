//! The same encrypted batch under several thread plans: timings, peak
//! concurrency and a byte-level comparison of the logits.
//!
//! cargo run --release --example thread_plans -- "1,1,1,1;2,2,2,2;4,1,1,4"

use hecnn::bench::{bench_threads, write_csv};
use hecnn::executor::ThreadPlan;
use hecnn::layers::PolyActivation;
use hecnn::model::{encrypt_model, Manifest};
use hecnn::packing::pack_batch_secret;
use hecnn::{dataset, derive_params, CkksBackend, HeBackend, ModelDesc};

fn main() -> hecnn::Result<()> {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "1,1,1,1;2,2,2,2;4,1,1,4".into());
    let workers = rayon::current_num_threads().max(4);
    let plans = arg
        .split(';')
        .map(|p| ThreadPlan::parse(p, workers))
        .collect::<hecnn::Result<Vec<_>>>()?;
    let model = ModelDesc::random(&Manifest::canonical(12, 12, 4, 3, 10, true, false, PolyActivation::default()), 5)?;
    let b = CkksBackend::new(derive_params(1 << 12, 240, 35, 1)?)?;
    let k = b.keygen()?;
    let em = encrypt_model(&b, &k.public, &model, 2)?;
    let x = pack_batch_secret(&b, &k.secret, &dataset::random_images(12, 12, 32, 4), 3)?;
    let sweep = bench_threads(&b, &k.eval, &em, &x, &plans)?;
    write_csv(&sweep.records, std::io::stdout())?;
    println!("logits bit-identical across plans: {}", sweep.identical);
    Ok(())
}
