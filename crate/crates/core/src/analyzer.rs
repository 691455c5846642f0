//! Static cost analysis of a model before anything is encrypted: per-layer
//! operation counts, multiplicative depth, peak ciphertext footprint, the
//! recommended modulus budget and a security verdict.

use serde::Serialize;
use std::fmt;

use crate::backend::OpCounts;
use crate::ckks::chain::{base_bits, chain_levels};
use crate::error::Result;
use crate::layers::PoolMode;
use crate::model::{Manifest, Topology};
use crate::params::{estimate_bits, HeParams, SecurityLevel, BITS_PER_LEVEL_HEURISTIC, SECURITY_TABLE};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub counts: OpCounts,
    /// Levels consumed on the deepest path through this layer.
    pub levels: usize,
    /// Ciphertexts this layer outputs.
    pub outputs: usize,
}

/// The modulus budget as the backend chain sees it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainView {
    pub modulus_bits: u32,
    pub precision_bits: u32,
    /// Levels the requested `L` affords.
    pub levels: usize,
    /// Smallest `L` whose chain affords the model's depth.
    pub min_modulus_bits: u32,
    pub sufficient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Verdict {
    Secure { bits: f64 },
    Insecure { bits: f64 },
    /// Ring degree outside the security table.
    Unknown,
    /// No tabulated ring degree holds the chain at 128 bits.
    InfeasibleWithoutBootstrapping,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Secure { bits } => write!(f, "secure ({})", SecurityLevel::Bits(*bits)),
            Verdict::Insecure { bits } => write!(f, "INSECURE ({})", SecurityLevel::Bits(*bits)),
            Verdict::Unknown => write!(f, "unknown ring degree"),
            Verdict::InfeasibleWithoutBootstrapping => write!(f, "infeasible without bootstrapping"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub totals: OpCounts,
    /// Deepest path ℓ, counting CT-CT and CT-PT multiplications.
    pub deepest_path_levels: usize,
    /// Heuristic budget `100 (ℓ + 1)` bits.
    pub recommended_l: u32,
    pub chain: ChainView,
    /// Ciphertexts alive per filter during the dense stage.
    pub peak_ciphertexts_per_filter: usize,
    pub peak_ciphertexts: usize,
    pub input_ciphertexts: usize,
    pub weight_ciphertexts: usize,
    pub ring_degree: usize,
    /// Security of `recommended_l` at this ring degree.
    pub verdict: Verdict,
}

/// `100 (ℓ + 1)`; zero for a model without multiplications.
pub fn recommended_l(depth: usize) -> u32 {
    if depth == 0 {
        0
    } else {
        BITS_PER_LEVEL_HEURISTIC * (depth as u32 + 1)
    }
}

/// Smallest chain budget affording `depth` rescales at precision `r`.
pub fn chain_min_bits(depth: usize, r: u32) -> u32 {
    base_bits(r) + depth as u32 * r
}

fn verdict(ring_degree: usize, depth: usize, l: u32, r: u32) -> Verdict {
    let largest = SECURITY_TABLE.last().map_or(0, |(_, c)| c[0]);
    if depth > 0 && chain_min_bits(depth, r).max(l) > largest {
        return Verdict::InfeasibleWithoutBootstrapping;
    }
    match estimate_bits(ring_degree, l) {
        SecurityLevel::Bits(b) if b >= 128.0 => Verdict::Secure { bits: b },
        SecurityLevel::Bits(b) => Verdict::Insecure { bits: b },
        SecurityLevel::Unknown => Verdict::Unknown,
    }
}

fn counts(ctct_mult: usize, ctpt_mult: usize, ctct_add: usize, ctpt_add: usize) -> OpCounts {
    OpCounts {
        ctct_mult: ctct_mult as u64,
        ctpt_mult: ctpt_mult as u64,
        ctct_add: ctct_add as u64,
        ctpt_add: ctpt_add as u64,
    }
}

/// Per-layer ledger for a validated topology.
pub fn layer_costs(t: &Topology) -> Vec<LayerCost> {
    let mut out = Vec::new();
    let (cr, cc, channels) = t.conv_out;
    if let Some(c) = t.conv {
        let cells = cr * cc;
        let pq = c.rows * c.cols;
        let b = usize::from(c.bias);
        out.push(LayerCost {
            layer: "conv2d".into(),
            counts: counts(
                c.filters * cells * pq,
                c.filters * b,
                c.filters * cells * (pq - 1 + b),
                0,
            ),
            levels: 1,
            outputs: c.filters * cells,
        });
    }
    if let Some((_, mode)) = t.act {
        let pre = cr * cc * channels;
        let pooled = pre / 4;
        let explicit = usize::from(mode == PoolMode::Explicit);
        out.push(LayerCost {
            layer: "actpool".into(),
            counts: counts(pre, 2 * pre + explicit * pooled, pre + 3 * pooled, pre),
            levels: mode.actpool_levels(),
            outputs: pooled,
        });
    }
    out.push(LayerCost {
        layer: "flatten".into(),
        counts: OpCounts::default(),
        levels: 0,
        outputs: t.flat_len(),
    });
    let d = t.dense;
    let b = usize::from(d.bias);
    out.push(LayerCost {
        layer: "dense".into(),
        counts: counts(
            d.in_dim * d.out_dim,
            d.out_dim * b,
            d.out_dim * (d.in_dim - 1 + b),
            0,
        ),
        levels: 1,
        outputs: d.out_dim,
    });
    out
}

/// `⌊(M-P+1)(N-Q+1)(R+1)/4⌋`: pooled activations of one filter plus its
/// share of dense weights, all held while the dense stage runs.
pub fn peak_ciphertexts_per_filter(t: &Topology) -> usize {
    let (cr, cc, _) = t.conv_out;
    cr * cc * (t.classes() + 1) / 4
}

pub fn analyze(manifest: &Manifest, params: &HeParams) -> Result<CostReport> {
    let r = params.precision_bits;
    if manifest.layers.is_empty() {
        return Ok(CostReport {
            layers: Vec::new(),
            totals: OpCounts::default(),
            deepest_path_levels: 0,
            recommended_l: 0,
            chain: ChainView {
                modulus_bits: params.modulus_bits,
                precision_bits: r,
                levels: chain_levels(params.modulus_bits, r).unwrap_or(0),
                min_modulus_bits: base_bits(r),
                sufficient: true,
            },
            peak_ciphertexts_per_filter: 0,
            peak_ciphertexts: 0,
            input_ciphertexts: manifest.input.rows * manifest.input.cols,
            weight_ciphertexts: 0,
            ring_degree: params.ring_degree,
            verdict: verdict(params.ring_degree, 0, params.modulus_bits, r),
        });
    }
    let t = manifest.topology()?;
    let layers = layer_costs(&t);
    let totals = layers.iter().fold(OpCounts::default(), |acc, l| acc + l.counts);
    let depth: usize = layers.iter().map(|l| l.levels).sum();
    let levels = chain_levels(params.modulus_bits, r).unwrap_or(0);
    let rec = recommended_l(depth);
    let per_filter = peak_ciphertexts_per_filter(&t);
    Ok(CostReport {
        layers,
        totals,
        deepest_path_levels: depth,
        recommended_l: rec,
        chain: ChainView {
            modulus_bits: params.modulus_bits,
            precision_bits: r,
            levels,
            min_modulus_bits: chain_min_bits(depth, r),
            sufficient: levels >= depth,
        },
        peak_ciphertexts_per_filter: per_filter,
        peak_ciphertexts: per_filter * t.conv_out.2,
        input_ciphertexts: t.input.0 * t.input.1,
        weight_ciphertexts: t.weight_ciphertexts(),
        ring_degree: params.ring_degree,
        verdict: verdict(params.ring_degree, depth, rec, r),
    })
}

/// Outcome of comparing predicted and counted operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    pub diffs: Vec<String>,
}

impl Verification {
    pub fn matches(&self) -> bool {
        self.diffs.is_empty()
    }
}

impl fmt::Display for Verification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.matches() {
            return write!(f, "prediction matches runtime counts");
        }
        for d in &self.diffs {
            writeln!(f, "{d}")?;
        }
        Ok(())
    }
}

fn diff_counts(layer: &str, want: OpCounts, got: OpCounts, out: &mut Vec<String>) {
    let pairs = [
        ("ctct_mult", want.ctct_mult, got.ctct_mult),
        ("ctpt_mult", want.ctpt_mult, got.ctpt_mult),
        ("ctct_add", want.ctct_add, got.ctct_add),
        ("ctpt_add", want.ctpt_add, got.ctpt_add),
    ];
    for (name, w, g) in pairs {
        if w != g {
            out.push(format!("{layer}: {name} predicted {w}, counted {g}"));
        }
    }
}

/// Compares per-layer runtime counts (layer name, counts) with the report.
/// Layers absent from `runtime` are taken as idle.
pub fn verify_against_runtime(report: &CostReport, runtime: &[(String, OpCounts)]) -> Verification {
    let mut diffs = Vec::new();
    for l in &report.layers {
        let got = runtime
            .iter()
            .filter(|(n, _)| *n == l.layer)
            .fold(OpCounts::default(), |acc, (_, c)| acc + *c);
        diff_counts(&l.layer, l.counts, got, &mut diffs);
    }
    for (n, c) in runtime {
        if !report.layers.iter().any(|l| &l.layer == n) && !c.is_zero() {
            diff_counts(n, OpCounts::default(), *c, &mut diffs);
        }
    }
    let total = runtime.iter().fold(OpCounts::default(), |acc, (_, c)| acc + *c);
    diff_counts("total", report.totals, total, &mut diffs);
    Verification { diffs }
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "layer,ctct_mult,ctpt_mult,ctct_add,ctpt_add,levels,outputs";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        let row = |name: &str, c: &OpCounts, levels: usize, outputs: usize| {
            format!(
                "{name},{},{},{},{},{levels},{outputs}\n",
                c.ctct_mult, c.ctpt_mult, c.ctct_add, c.ctpt_add
            )
        };
        for l in &self.layers {
            s += &row(&l.layer, &l.counts, l.levels, l.outputs);
        }
        let outputs = self.layers.last().map_or(0, |l| l.outputs);
        s += &row("total", &self.totals, self.deepest_path_levels, outputs);
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>12} {:>10} {:>12} {:>10} {:>6} {:>8}",
            "layer", "ct*ct", "ct*pt", "ct+ct", "ct+pt", "levels", "outputs"
        )?;
        let line = |f: &mut fmt::Formatter<'_>, n: &str, c: &OpCounts, lv: usize, o: usize| {
            writeln!(
                f,
                "{n:<8} {:>12} {:>10} {:>12} {:>10} {lv:>6} {o:>8}",
                c.ctct_mult, c.ctpt_mult, c.ctct_add, c.ctpt_add
            )
        };
        for l in &self.layers {
            line(f, &l.layer, &l.counts, l.levels, l.outputs)?;
        }
        line(
            f,
            "total",
            &self.totals,
            self.deepest_path_levels,
            self.layers.last().map_or(0, |l| l.outputs),
        )?;
        writeln!(f)?;
        writeln!(f, "deepest path          {} levels", self.deepest_path_levels)?;
        writeln!(f, "recommended L         {} bits (100 bits per level + 100)", self.recommended_l)?;
        writeln!(
            f,
            "chain at L={} r={}   {} levels ({}; needs L >= {})",
            self.chain.modulus_bits,
            self.chain.precision_bits,
            self.chain.levels,
            if self.chain.sufficient { "enough" } else { "NOT enough" },
            self.chain.min_modulus_bits
        )?;
        writeln!(
            f,
            "peak ciphertexts      {} per filter, {} total",
            self.peak_ciphertexts_per_filter, self.peak_ciphertexts
        )?;
        writeln!(
            f,
            "ciphertexts           {} input, {} weights",
            self.input_ciphertexts, self.weight_ciphertexts
        )?;
        write!(f, "security at phi(m)={}, L={}: {}", self.ring_degree, self.recommended_l, self.verdict)
    }
}
