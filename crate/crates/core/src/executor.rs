//! Two-stage fork-join inference.
//!
//! Stage 1 runs `F` filter groups, each splitting its convolution into `C`
//! horizontal bands that also apply the activation cell by cell. Pooling
//! windows straddle band borders, so a filter pools only after all its bands
//! have joined. Stage 2 runs `H` class groups, each spreading the fixed
//! dense blocks over `J` tasks; block partials are then summed in ascending
//! order. Every reduction order is fixed, so outputs do not depend on the plan.

use rayon::prelude::*;
use std::ops::Range;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::time::Instant;

use crate::backend::{Evaluator, HeBackend, OpCounters, OpCounts};
use crate::error::{Error, Result};
use crate::layers::{self, Ct};
use crate::model::{EncryptedModel, Topology};
use crate::packing::CipherMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThreadPlan {
    /// Filter groups (F).
    pub filters: usize,
    /// Convolution bands per filter (C).
    pub conv: usize,
    /// Class groups (H).
    pub classes: usize,
    /// Block tasks per class (J).
    pub channels: usize,
    pub max_workers: usize,
}

impl ThreadPlan {
    pub fn serial() -> Self {
        Self::new(1, 1, 1, 1, 1)
    }

    pub fn new(filters: usize, conv: usize, classes: usize, channels: usize, max_workers: usize) -> Self {
        Self {
            filters,
            conv,
            classes,
            channels,
            max_workers,
        }
    }

    /// Parses `"F,C,H,J"`.
    pub fn parse(s: &str, max_workers: usize) -> Result<Self> {
        let v = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Execution(format!("bad plan {s:?}: {e}")))?;
        let [f, c, h, j] = v[..] else {
            return Err(Error::Execution(format!("plan {s:?} must be F,C,H,J")));
        };
        Ok(Self::new(f, c, h, j, max_workers))
    }

    /// All filters at once, the remaining workers spread over bands; the
    /// dense stage mirrors that with classes and blocks.
    pub fn default_for(t: &Topology, workers: usize) -> Self {
        let workers = workers.max(1);
        let f = t.conv_out.2.max(1);
        let h = t.classes().min(workers).max(1);
        Self::new(f, workers.div_ceil(f), h, workers.div_ceil(h), workers)
    }

    pub fn validate(&self, t: &Topology) -> Result<()> {
        let p = [self.filters, self.conv, self.classes, self.channels, self.max_workers];
        if p.contains(&0) {
            return Err(Error::Execution(format!("thread plan entries must be >= 1: {self}")));
        }
        if self.filters > t.conv_out.2 {
            return Err(Error::Execution(format!(
                "F = {} exceeds the {} filters",
                self.filters, t.conv_out.2
            )));
        }
        if self.classes > t.classes() {
            return Err(Error::Execution(format!(
                "H = {} exceeds the {} classes",
                self.classes,
                t.classes()
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for ThreadPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "F={} C={} H={} J={} workers={}",
            self.filters, self.conv, self.classes, self.channels, self.max_workers
        )
    }
}

/// One convolution band: the output rows it writes and the input rows it reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub out_rows: Range<usize>,
    pub in_rows: Range<usize>,
}

/// Splits the `M - P + 1` output rows into `C` contiguous bands whose sizes
/// differ by at most one; input bands overlap by `P - 1` rows. `C` larger than
/// the row count is clamped.
pub fn plan_partitions(m: usize, p: usize, c: usize) -> Vec<Partition> {
    let rows = m + 1 - p.min(m);
    if c > rows {
        log::warn!("{c} convolution bands for {rows} output rows, using {rows}");
    }
    bands(rows, c)
        .into_iter()
        .map(|out_rows| Partition {
            in_rows: out_rows.start..out_rows.end + p - 1,
            out_rows,
        })
        .collect()
}

/// `min(c, rows)` contiguous ranges covering `0..rows`, sizes within one.
fn bands(rows: usize, c: usize) -> Vec<Range<usize>> {
    let c = c.clamp(1, rows.max(1));
    let (base, extra) = (rows / c, rows % c);
    let mut start = 0;
    (0..c)
        .map(|i| {
            let len = base + usize::from(i < extra);
            start += len;
            start - len..start
        })
        .collect()
}

/// Tracks concurrently running leaf tasks and the maximum seen.
#[derive(Debug, Default)]
struct HighWater {
    live: AtomicUsize,
    peak: AtomicUsize,
}

struct Active<'a>(&'a HighWater);

impl HighWater {
    fn enter(&self) -> Active<'_> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        Active(self)
    }

    fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for Active<'_> {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Operation tallies split by layer.
#[derive(Debug, Default)]
pub struct LayerCounters {
    pub conv: OpCounters,
    pub act: OpCounters,
    pub dense: OpCounters,
}

impl LayerCounters {
    /// `(layer, counts)` in topology order, as the analyzer lists them.
    pub fn by_layer(&self, t: &Topology) -> Vec<(String, OpCounts)> {
        t.layers
            .iter()
            .map(|&n| {
                let c = match n {
                    "conv2d" => self.conv.snapshot(),
                    "actpool" => self.act.snapshot(),
                    "dense" => self.dense.snapshot(),
                    _ => OpCounts::default(),
                };
                (n.to_string(), c)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub plan: ThreadPlan,
    pub batch: usize,
    pub stage1_s: f64,
    pub stage2_s: f64,
    pub total_s: f64,
    pub hwm_stage1: usize,
    pub hwm_stage2: usize,
    /// Pool reads that happened before their filter's barrier. Always 0.
    pub barrier_violations: usize,
    pub layer_counts: Vec<(String, OpCounts)>,
}

impl RunReport {
    pub fn amortized_ms(&self) -> f64 {
        self.total_s * 1e3 / self.batch.max(1) as f64
    }
}

pub struct Inference<C> {
    /// `1 x R` grid of logits, slot `j` for image `j`.
    pub logits: CipherMatrix<C>,
    pub report: RunReport,
}

fn check_inputs<B: HeBackend>(model: &EncryptedModel<B>, input: &CipherMatrix<Ct<B>>) -> Result<()> {
    let t = &model.topology;
    if (input.rows, input.cols) != t.input {
        return Err(Error::Dimension(format!(
            "input is {}x{}, model expects {}x{}",
            input.rows, input.cols, t.input.0, t.input.1
        )));
    }
    Ok(())
}

/// Runs the encrypted model under `plan`. The evaluation key is the only key
/// material needed.
pub fn run_inference<B: HeBackend>(
    backend: &B,
    eval_key: &B::EvalKey,
    model: &EncryptedModel<B>,
    input: &CipherMatrix<Ct<B>>,
    plan: ThreadPlan,
) -> Result<Inference<Ct<B>>> {
    let t = &model.topology;
    plan.validate(t)?;
    check_inputs(model, input)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.max_workers)
        .thread_name(|i| format!("hecnn-worker-{i}"))
        .build()
        .map_err(|e| Error::Execution(format!("cannot start worker pool: {e}")))?;
    let counters = LayerCounters::default();
    let base = OpCounters::new();
    let ev = Evaluator::new(backend, eval_key, &base);
    let (hw1, hw2) = (HighWater::default(), HighWater::default());
    let violations = AtomicUsize::new(0);

    let run = || -> Result<(Vec<Ct<B>>, f64, f64)> {
        let t0 = Instant::now();
        let maps = pool.install(|| stage1(&ev, &counters, model, input, plan, &hw1, &violations))?;
        let t1 = Instant::now();
        let flat = layers::flatten(maps)?;
        let logits = pool.install(|| stage2(&ev.with_counters(&counters.dense), model, &flat, plan, &hw2))?;
        let t2 = Instant::now();
        Ok((logits, (t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64()))
    };
    let (logits, stage1_s, stage2_s) = catch_unwind(AssertUnwindSafe(run)).map_err(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        Error::Execution(format!("worker panicked: {msg}"))
    })??;
    let report = RunReport {
        plan,
        batch: input.batch,
        stage1_s,
        stage2_s,
        total_s: stage1_s + stage2_s,
        hwm_stage1: hw1.peak(),
        hwm_stage2: hw2.peak(),
        barrier_violations: violations.load(Ordering::SeqCst),
        layer_counts: counters.by_layer(t),
    };
    Ok(Inference {
        logits: CipherMatrix::new(1, logits.len(), input.batch, logits)?,
        report,
    })
}

/// Indices `g, g + step, g + 2 step, ...` below `n`.
fn strided(g: usize, step: usize, n: usize) -> Vec<usize> {
    (g..n).step_by(step).collect()
}

fn stage1<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    counters: &LayerCounters,
    model: &EncryptedModel<B>,
    input: &CipherMatrix<Ct<B>>,
    plan: ThreadPlan,
    hw: &HighWater,
    violations: &AtomicUsize,
) -> Result<Vec<CipherMatrix<Ct<B>>>> {
    let channels = model.topology.conv_out.2;
    let groups: Vec<Vec<usize>> = (0..plan.filters).map(|g| strided(g, plan.filters, channels)).collect();
    let done = groups
        .par_iter()
        .map(|fs| {
            fs.iter()
                .map(|&f| filter_task(ev, counters, model, input, f, plan.conv, hw, violations).map(|m| (f, m)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut maps: Vec<_> = done.into_iter().flatten().collect();
    maps.sort_by_key(|(f, _)| *f);
    Ok(maps.into_iter().map(|(_, m)| m).collect())
}

#[allow(clippy::too_many_arguments)]
fn filter_task<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    counters: &LayerCounters,
    model: &EncryptedModel<B>,
    input: &CipherMatrix<Ct<B>>,
    f: usize,
    band_count: usize,
    hw: &HighWater,
    violations: &AtomicUsize,
) -> Result<CipherMatrix<Ct<B>>> {
    let t = &model.topology;
    let (rows, cols, _) = t.conv_out;
    let conv_ev = ev.with_counters(&counters.conv);
    let act_ev = ev.with_counters(&counters.act);
    let kernel = model.kernels.get(f);
    let bias = match kernel {
        Some(k) => layers::conv_bias_term(&conv_ev, input, k)?,
        None => None,
    };
    if kernel.is_none() && t.act.is_none() {
        return Ok(input.clone());
    }
    let cells: Vec<OnceLock<Ct<B>>> = (0..rows * cols).map(|_| OnceLock::new()).collect();
    let p = kernel.map_or(1, |k| k.rows);
    let barrier = AtomicBool::new(false);
    plan_partitions(input.rows, p, band_count).par_iter().try_for_each(|band| {
        let _active = hw.enter();
        for i in band.out_rows.clone() {
            for j in 0..cols {
                let y = match kernel {
                    Some(k) => {
                        let c = layers::conv_cell(&conv_ev, input, k, i, j)?;
                        match &bias {
                            Some(b) => conv_ev.add(&c, b)?,
                            None => c,
                        }
                    }
                    None => input.get(i, j).clone(),
                };
                let out = match &t.act {
                    Some((act, mode)) => layers::approx_relu(&act_ev, &y, act, *mode)?,
                    None => y,
                };
                if cells[i * cols + j].set(out).is_err() {
                    return Err(Error::Execution(format!("cell ({i},{j}) written by two bands")));
                }
            }
        }
        Ok(())
    })?;
    barrier.store(true, Ordering::SeqCst);
    let read = |r: usize, c: usize| -> Result<&Ct<B>> {
        if !barrier.load(Ordering::SeqCst) {
            violations.fetch_add(1, Ordering::SeqCst);
        }
        cells[r * cols + c]
            .get()
            .ok_or_else(|| Error::Execution(format!("filter {f}: cell ({r},{c}) read before it was written")))
    };
    let Some((_, mode)) = t.act else {
        let cells = (0..rows * cols)
            .map(|i| read(i / cols, i % cols).cloned())
            .collect::<Result<Vec<_>>>()?;
        return CipherMatrix::new(rows, cols, input.batch, cells);
    };
    let (pr, pc) = (rows / 2, cols / 2);
    // Pooled rows split into the same number of bands as the convolution.
    let pooled = bands(pr, band_count)
        .into_par_iter()
        .map(|rows| {
            let _active = hw.enter();
            rows.flat_map(|i| (0..pc).map(move |j| (i, j)))
                .map(|(i, j)| {
                    let w = layers::window(i, j);
                    let acts = [read(w[0].0, w[0].1)?, read(w[1].0, w[1].1)?, read(w[2].0, w[2].1)?, read(w[3].0, w[3].1)?];
                    layers::pool_window(&act_ev, acts, mode)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    CipherMatrix::new(pr, pc, input.batch, pooled.into_iter().flatten().collect())
}

fn stage2<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    model: &EncryptedModel<B>,
    flat: &[Ct<B>],
    plan: ThreadPlan,
    hw: &HighWater,
) -> Result<Vec<Ct<B>>> {
    let w = &model.dense;
    if flat.len() != w.in_dim {
        return Err(Error::Dimension(format!(
            "dense layer expects {} inputs, got {}",
            w.in_dim,
            flat.len()
        )));
    }
    let out = (0..plan.classes)
        .into_par_iter()
        .map(|h| {
            strided(h, plan.classes, w.out_dim)
                .into_iter()
                .map(|r| {
                    let parts = (0..plan.channels)
                        .into_par_iter()
                        .map(|j| {
                            let _active = hw.enter();
                            strided(j, plan.channels, w.blocks())
                                .into_iter()
                                .map(|b| layers::dense_block(ev, flat, w, r, b).map(|c| (b, c)))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let mut parts: Vec<_> = parts.into_iter().flatten().collect();
                    parts.sort_by_key(|(b, _)| *b);
                    let parts: Vec<_> = parts.into_iter().map(|(_, c)| c).collect();
                    layers::dense_combine(ev, &parts, w, r).map(|c| (r, c))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut logits: Vec<_> = out.into_iter().flatten().collect();
    logits.sort_by_key(|(r, _)| *r);
    Ok(logits.into_iter().map(|(_, c)| c).collect())
}

/// Layer-by-layer evaluation on the calling thread, without any plan.
pub fn run_serial<B: HeBackend>(
    backend: &B,
    eval_key: &B::EvalKey,
    model: &EncryptedModel<B>,
    input: &CipherMatrix<Ct<B>>,
    counters: &LayerCounters,
) -> Result<CipherMatrix<Ct<B>>> {
    check_inputs(model, input)?;
    let t = &model.topology;
    let base = OpCounters::new();
    let ev = Evaluator::new(backend, eval_key, &base);
    let conv_ev = ev.with_counters(&counters.conv);
    let act_ev = ev.with_counters(&counters.act);
    let mut maps = if model.kernels.is_empty() {
        vec![input.clone()]
    } else {
        model
            .kernels
            .iter()
            .map(|k| layers::conv2d_enc(&conv_ev, input, k))
            .collect::<Result<Vec<_>>>()?
    };
    if let Some((act, mode)) = &t.act {
        maps = maps
            .iter()
            .map(|m| layers::act_pool(&act_ev, m, act, *mode))
            .collect::<Result<Vec<_>>>()?;
    }
    let flat = layers::flatten(maps)?;
    let logits = layers::dense_enc(&ev.with_counters(&counters.dense), &flat, &model.dense)?;
    CipherMatrix::new(1, logits.len(), input.batch, logits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_bands_over_28_rows() {
        let parts = plan_partitions(28, 3, 7);
        let sizes: Vec<usize> = parts.iter().map(|p| p.out_rows.len()).collect();
        assert_eq!(sizes, vec![4, 4, 4, 4, 4, 3, 3]);
        assert!(parts.iter().all(|p| p.in_rows.len() == p.out_rows.len() + 2));
        assert_eq!(parts.last().unwrap().out_rows.end, 26);
    }

    #[test]
    fn small_partitions() {
        assert_eq!(
            plan_partitions(4, 3, 2),
            vec![
                Partition { out_rows: 0..1, in_rows: 0..3 },
                Partition { out_rows: 1..2, in_rows: 1..4 },
            ]
        );
        assert_eq!(plan_partitions(10, 3, 1), vec![Partition { out_rows: 0..8, in_rows: 0..10 }]);
        assert_eq!(plan_partitions(4, 3, 9).len(), 2);
    }

    #[test]
    fn plan_parsing() {
        assert_eq!(ThreadPlan::parse("2,3,2,2", 4).unwrap(), ThreadPlan::new(2, 3, 2, 2, 4));
        assert!(ThreadPlan::parse("2,3,2", 4).is_err());
        assert!(ThreadPlan::parse("a,3,2,1", 4).is_err());
    }

    #[test]
    fn high_water_mark() {
        let hw = HighWater::default();
        {
            let _a = hw.enter();
            let _b = hw.enter();
        }
        let _c = hw.enter();
        assert_eq!(hw.peak(), 2);
    }
}
