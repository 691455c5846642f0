//! CT-CT add and mult cost as the modulus grows at fixed ring degree, with a
//! least-squares fit per operation.
//!
//! cargo run --release --example param_sweep -- 2^13 50

use hecnn::bench::{bench_params, linear_fit, series, write_csv};
use hecnn::CkksBackend;

fn main() -> hecnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let m = args
        .next()
        .map(|s| hecnn::HeParams::parse_triple(&format!("{s},200,35"), 0).map(|p| p.m))
        .transpose()?
        .unwrap_or(1 << 13);
    let trials = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let records = bench_params::<CkksBackend>(m, &[200, 300, 400, 500, 600], 35, trials, 1)?;
    write_csv(&records, std::io::stdout())?;
    for op in ["ctct_add", "ctct_mult"] {
        let (x, y) = series(&records, op, |r| r.mean_us);
        let fit = linear_fit(&x, &y);
        println!("{op}: {:.3} us per modulus bit, R2 {:.3}", fit.slope, fit.r2);
    }
    Ok(())
}
