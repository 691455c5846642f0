//! The quadratic ReLU stand-in, in clear and under encryption.
//!
//! cargo run --release --example activation

use hecnn::layers::{approx_relu, PolyActivation, PoolMode};
use hecnn::{derive_params, CkksBackend, Evaluator, HeBackend, OpCounters, PlainVec};

fn main() -> hecnn::Result<()> {
    let g = PolyActivation::default();
    let xs: Vec<f64> = (-4..=4).map(|i| i as f64 * 2f64.sqrt() / 4.0).collect();
    let b = CkksBackend::new(derive_params(1 << 11, 200, 35, 1)?)?;
    let k = b.keygen()?;
    let ct = b.encrypt(&k.public, &PlainVec::new(xs.clone(), b.params().default_scale()), &mut rand::rng())?;
    let counters = OpCounters::new();
    let y = approx_relu(&Evaluator::new(&b, &k.eval, &counters), &ct, &g, PoolMode::Explicit)?;
    let got = b.decrypt(&k.secret, &y)?;
    println!("{:>8} {:>8} {:>10} {:>10}", "x", "relu", "g(x)", "enc");
    for (i, x) in xs.iter().enumerate() {
        println!("{x:>8.3} {:>8.3} {:>10.6} {:>10.6}", x.max(0.0), g.g(*x), got.values()[i]);
    }
    println!("{}", counters.snapshot());
    Ok(())
}
