//! Wall-clock cost of each homomorphic primitive at one parameter set.
//!
//! cargo run --release --example op_costs -- 2^14,240,35

use std::time::Instant;

use hecnn::{CkksBackend, HeBackend, HeParams, PlainVec};

fn time<T>(label: &str, reps: usize, mut f: impl FnMut() -> T) {
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(f());
    }
    println!("{label:<24} {:>10.3} ms", t.elapsed().as_secs_f64() * 1e3 / reps as f64);
}

fn main() -> hecnn::Result<()> {
    let arg = std::env::args().nth(1).unwrap_or_else(|| "2^14,240,35".into());
    let params = HeParams::parse_triple(&arg, 7)?;
    println!("m={} N={} L={} r={}", params.m, params.ring_degree, params.modulus_bits, params.precision_bits);
    let b = CkksBackend::new(params)?;
    let k = b.keygen()?;
    let scale = b.params().default_scale();
    let mut rng = rand::rng();
    let v: Vec<f64> = (0..b.slots()).map(|i| (i % 7) as f64 / 7.0).collect();
    let x = b.encrypt(&k.public, &PlainVec::new(v.clone(), scale), &mut rng)?;
    let w = b.encrypt(&k.public, &PlainVec::broadcast(0.5, scale), &mut rng)?;
    time("encrypt", 5, || b.encrypt(&k.public, &PlainVec::new(v.clone(), scale), &mut rng));
    time("decrypt", 5, || b.decrypt(&k.secret, &x));
    time("add", 50, || b.add(&x, &w));
    time("mul (relin + rescale)", 10, || b.mul(&k.eval, &x, &w));
    time("mul_plain", 10, || b.mul_plain(&x, &PlainVec::broadcast(0.25, scale)));
    let xs = vec![&x; 9];
    let ws = vec![&w; 9];
    time("inner_product(9)", 10, || b.inner_product(&k.eval, &xs, &ws));
    Ok(())
}
