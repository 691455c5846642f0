//! Parameter and thread-plan sweeps with CSV output.

use rand::Rng;
use serde::Serialize;
use std::io::Write;
use std::time::Instant;

use crate::backend::{CipherText, HeBackend, PlainVec};
use crate::error::{Error, Result};
use crate::executor::{run_inference, RunReport, ThreadPlan};
use crate::layers::Ct;
use crate::model::EncryptedModel;
use crate::packing::CipherMatrix;
use crate::params::derive_params;
use crate::rng;

pub const MIN_TRIALS: usize = 30;
pub const PARAMS_CSV_HEADER: &str = "m,L,r,op,mean_us,std_us,ct_bytes,lambda";
pub const THREADS_CSV_HEADER: &str =
    "F,C,H,J,max_workers,stage1_s,stage2_s,total_s,hwm_stage1,hwm_stage2,amortized_ms";

/// Timing of one homomorphic operation at one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub m: usize,
    #[serde(rename = "L")]
    pub l: u32,
    pub r: u32,
    pub op: String,
    pub mean_us: f64,
    pub std_us: f64,
    /// Size of a fresh top-level ciphertext.
    pub ct_bytes: usize,
    /// Estimated security in bits, or `unknown`.
    pub lambda: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThreadRecord {
    #[serde(rename = "F")]
    pub f: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "J")]
    pub j: usize,
    pub max_workers: usize,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub total_s: f64,
    pub hwm_stage1: usize,
    pub hwm_stage2: usize,
    pub amortized_ms: f64,
}

impl From<&RunReport> for ThreadRecord {
    fn from(r: &RunReport) -> Self {
        Self {
            f: r.plan.filters,
            c: r.plan.conv,
            h: r.plan.classes,
            j: r.plan.channels,
            max_workers: r.plan.max_workers,
            stage1_s: r.stage1_s,
            stage2_s: r.stage2_s,
            total_s: r.total_s,
            hwm_stage1: r.hwm_stage1,
            hwm_stage2: r.hwm_stage2,
            amortized_ms: r.amortized_ms(),
        }
    }
}

/// Writes records with a header row.
pub fn write_csv<T: Serialize>(records: &[T], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r).map_err(|e| Error::Execution(format!("csv: {e}")))?;
    }
    out.flush()?;
    Ok(())
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

fn time_us(trials: usize, mut op: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    let mut samples = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        op()?;
        samples.push(t.elapsed().as_secs_f64() * 1e6);
    }
    Ok(mean_std(&samples))
}

/// Times CT-CT addition and multiplication (relinearization and rescale
/// included) over `trials` runs for every `L`, at fixed `m` and `r`.
pub fn bench_params<B: HeBackend>(
    m: usize,
    ls: &[u32],
    r: u32,
    trials: usize,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if trials < MIN_TRIALS {
        return Err(Error::Execution(format!("at least {MIN_TRIALS} trials required, got {trials}")));
    }
    let mut out = Vec::new();
    for &l in ls {
        let params = derive_params(m, l, r, seed)?;
        let lambda = params
            .security()
            .bits()
            .map_or_else(|| "unknown".to_string(), |b| format!("{b:.1}"));
        let backend = B::new(params)?;
        let keys = backend.keygen()?;
        let mut rng = rng::stream(seed, "bench-params", l as u64);
        let scale = backend.params().default_scale();
        let mut fresh = || -> Result<B::Ciphertext> {
            let v: Vec<f64> = (0..backend.slots()).map(|_| rng.random_range(-1.0..1.0)).collect();
            backend.encrypt(&keys.public, &PlainVec::new(v, scale), &mut rng)
        };
        let (a, b) = (fresh()?, fresh()?);
        let ct_bytes = a.byte_size();
        let (add_mean, add_std) = time_us(trials, || backend.add(&a, &b).map(drop))?;
        let (mul_mean, mul_std) = time_us(trials, || backend.mul(&keys.eval, &a, &b).map(drop))?;
        for (op, mean_us, std_us) in [("ctct_add", add_mean, add_std), ("ctct_mult", mul_mean, mul_std)] {
            out.push(BenchRecord {
                m,
                l,
                r,
                op: op.into(),
                mean_us,
                std_us,
                ct_bytes,
                lambda: lambda.clone(),
            });
        }
        log::info!("L={l}: add {add_mean:.1} us, mult {mul_mean:.1} us, {ct_bytes} bytes");
    }
    Ok(out)
}

/// Least-squares line through `(x, y)` and its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> LinearFit {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 && sxx > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

pub fn is_monotone_increasing(ys: &[f64]) -> bool {
    ys.windows(2).all(|w| w[1] > w[0])
}

/// `(L, value)` series of one column for one op, in sweep order.
pub fn series(records: &[BenchRecord], op: &str, value: impl Fn(&BenchRecord) -> f64) -> (Vec<f64>, Vec<f64>) {
    records
        .iter()
        .filter(|r| r.op == op)
        .map(|r| (f64::from(r.l), value(r)))
        .unzip()
}

/// Outcome of a plan sweep.
pub struct ThreadSweep<C> {
    pub records: Vec<ThreadRecord>,
    pub reports: Vec<RunReport>,
    /// Serialized logits of every plan are byte-identical.
    pub identical: bool,
    pub logits: CipherMatrix<C>,
}

fn logits_bytes<B: HeBackend>(backend: &B, cm: &CipherMatrix<Ct<B>>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for c in &cm.cells {
        backend.write_ciphertext_payload(c, &mut buf)?;
    }
    Ok(buf)
}

/// Runs the same encrypted inference under every plan.
pub fn bench_threads<B: HeBackend>(
    backend: &B,
    eval_key: &B::EvalKey,
    model: &EncryptedModel<B>,
    input: &CipherMatrix<Ct<B>>,
    plans: &[ThreadPlan],
) -> Result<ThreadSweep<Ct<B>>> {
    let Some(first) = plans.first() else {
        return Err(Error::Execution("no thread plans given".into()));
    };
    let base = run_inference(backend, eval_key, model, input, *first)?;
    let reference = logits_bytes(backend, &base.logits)?;
    let mut reports = vec![base.report];
    let mut identical = true;
    for plan in &plans[1..] {
        let run = run_inference(backend, eval_key, model, input, *plan)?;
        identical &= logits_bytes(backend, &run.logits)? == reference;
        reports.push(run.report);
    }
    Ok(ThreadSweep {
        records: reports.iter().map(ThreadRecord::from).collect(),
        reports,
        identical,
        logits: base.logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_a_line() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0, 2.0, 3.0, 4.0], &[1.0, -1.0, 1.0, -1.0]).r2 < 0.5);
    }

    #[test]
    fn csv_headers() {
        let rec = BenchRecord {
            m: 1024,
            l: 200,
            r: 30,
            op: "ctct_add".into(),
            mean_us: 1.5,
            std_us: 0.25,
            ct_bytes: 10,
            lambda: "128.0".into(),
        };
        let mut buf = Vec::new();
        write_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), PARAMS_CSV_HEADER);
        assert_eq!(text.lines().nth(1).unwrap(), "1024,200,30,ctct_add,1.5,0.25,10,128.0");
    }

    #[test]
    fn too_few_trials() {
        assert!(bench_params::<crate::reference::RefBackend>(1024, &[200], 30, 5, 0).is_err());
    }

    #[test]
    fn monotone() {
        assert!(is_monotone_increasing(&[1.0, 2.0, 3.0]));
        assert!(!is_monotone_increasing(&[1.0, 1.0]));
    }
}
