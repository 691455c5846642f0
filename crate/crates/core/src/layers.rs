//! Encrypted CNN primitives over packed ciphertext grids. Every function is
//! generic over the backend and counts its work through the [`Evaluator`].
//!
//! Operands meeting at an addition always share level and scale by
//! construction, so no implicit scale alignment is ever triggered here.

use serde::{Deserialize, Serialize};

use crate::backend::{product_level_scale, CipherText, Evaluator, HeBackend};
use crate::error::{Error, Result};
use crate::packing::{CipherKernel, CipherMatrix};

pub type Ct<B> = <B as HeBackend>::Ciphertext;

/// Width of the fixed input blocks a dense dot product is split into. Block
/// sums are combined in ascending order, whatever the thread plan.
pub const DENSE_BLOCK: usize = 64;

/// `g(u) = a0 + a1 u + a2 u^2`, applied as `s * g(y / s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyActivation {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    /// Pre-activation scaling keeping `y / s` inside `[-√2, √2]`.
    pub s: f64,
}

impl Default for PolyActivation {
    fn default() -> Self {
        Self {
            a0: 0.47,
            a1: 0.50,
            a2: 0.09,
            s: 1.0,
        }
    }
}

impl PolyActivation {
    pub fn with_scale(s: f64) -> Self {
        Self { s, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::Model(format!("activation scale s = {} must be positive", self.s)));
        }
        if ![self.a0, self.a1, self.a2].iter().all(|c| c.is_finite()) {
            return Err(Error::Model("non-finite activation coefficient".into()));
        }
        Ok(())
    }

    pub fn g(&self, u: f64) -> f64 {
        self.a0 + self.a1 * u + self.a2 * u * u
    }

    /// Coefficients `(c2, c1, c0)` with `c2 y^2 + c1 y + c0 = w * s * g(y / s)`,
    /// where `w` is 1/4 when the pooling factor is folded in.
    pub fn folded(&self, mode: PoolMode) -> (f64, f64, f64) {
        let w = match mode {
            PoolMode::Explicit => 1.0,
            PoolMode::Folded => 0.25,
        };
        (w * self.a2 / self.s, w * self.a1, w * self.a0 * self.s)
    }
}

/// Where the 1/4 mean-pool factor is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Separate plaintext multiplication by 1/4 after summing (one level).
    #[default]
    Explicit,
    /// 1/4 folded into the activation coefficients (no extra level).
    Folded,
}

impl PoolMode {
    /// Levels consumed by a fused activation + pooling layer.
    pub fn actpool_levels(self) -> usize {
        match self {
            PoolMode::Explicit => 3,
            PoolMode::Folded => 2,
        }
    }
}

/// Output cell `(i, j)` of a valid cross-correlation: `Σ_{p,q} x[i+p][j+q] * k[p][q]`
/// in row-major `(p, q)` order.
pub fn conv_cell<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    x: &CipherMatrix<Ct<B>>,
    k: &CipherKernel<Ct<B>>,
    i: usize,
    j: usize,
) -> Result<Ct<B>> {
    let mut xs = Vec::with_capacity(k.rows * k.cols);
    let mut ws = Vec::with_capacity(k.rows * k.cols);
    for p in 0..k.rows {
        for q in 0..k.cols {
            xs.push(x.get(i + p, j + q));
            ws.push(k.get(p, q));
        }
    }
    ev.inner_product(&xs, &ws)
}

/// The bias ciphertext brought to the level and scale of the convolution
/// outputs it is added to (one CT-PT multiplication by 1).
pub fn conv_bias_term<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    x: &CipherMatrix<Ct<B>>,
    k: &CipherKernel<Ct<B>>,
) -> Result<Option<Ct<B>>> {
    let Some(bias) = &k.bias else { return Ok(None) };
    let (x0, w0) = (&x.cells[0], &k.cells[0]);
    let (_, target) = product_level_scale(
        ev.backend().chain(),
        (x0.level(), x0.scale()),
        (w0.level(), w0.scale()),
    )?;
    ev.mul_const_to_scale(bias, 1.0, target).map(Some)
}

fn check_conv_dims<C>(x: &CipherMatrix<C>, k: &CipherKernel<C>) -> Result<()> {
    if k.rows == 0 || k.cols == 0 || k.rows > x.rows || k.cols > x.cols {
        return Err(Error::Dimension(format!(
            "{}x{} kernel on a {}x{} input",
            k.rows, k.cols, x.rows, x.cols
        )));
    }
    Ok(())
}

/// Valid convolution, stride 1, no kernel flip. Consumes one level.
pub fn conv2d_enc<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    x: &CipherMatrix<Ct<B>>,
    k: &CipherKernel<Ct<B>>,
) -> Result<CipherMatrix<Ct<B>>> {
    check_conv_dims(x, k)?;
    let (rows, cols) = (x.rows - k.rows + 1, x.cols - k.cols + 1);
    let bias = conv_bias_term(ev, x, k)?;
    let mut cells = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let c = conv_cell(ev, x, k, i, j)?;
            cells.push(match &bias {
                Some(b) => ev.add(&c, b)?,
                None => c,
            });
        }
    }
    CipherMatrix::new(rows, cols, x.batch, cells)
}

/// `s * g(y / s)` (scaled by 1/4 in folded mode). Consumes two levels.
pub fn approx_relu<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    y: &Ct<B>,
    act: &PolyActivation,
    mode: PoolMode,
) -> Result<Ct<B>> {
    act.validate()?;
    let (c2, c1, c0) = act.folded(mode);
    let sq = ev.mul(y, y)?;
    let quad = ev.mul_const(&sq, c2)?;
    let lin = ev.mul_const_to_scale(y, c1, quad.scale())?;
    let sum = ev.add(&quad, &lin)?;
    ev.add_const(&sum, c0)
}

/// Mean of four activated window cells given in row-major window order.
pub fn pool_window<B: HeBackend>(ev: &Evaluator<'_, B>, acts: [&Ct<B>; 4], mode: PoolMode) -> Result<Ct<B>> {
    let s = ev.add(acts[0], acts[1])?;
    let s = ev.add(&s, acts[2])?;
    let s = ev.add(&s, acts[3])?;
    match mode {
        PoolMode::Explicit => ev.mul_const(&s, 0.25),
        PoolMode::Folded => Ok(s),
    }
}

/// Window of output cell `(i, j)`: `(2i,2j), (2i,2j+1), (2i+1,2j), (2i+1,2j+1)`.
pub fn window(i: usize, j: usize) -> [(usize, usize); 4] {
    [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)]
}

/// Fused approximate ReLU and 2x2 mean pooling.
pub fn act_pool<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    y: &CipherMatrix<Ct<B>>,
    act: &PolyActivation,
    mode: PoolMode,
) -> Result<CipherMatrix<Ct<B>>> {
    if !y.rows.is_multiple_of(2) || !y.cols.is_multiple_of(2) {
        return Err(Error::Dimension(format!(
            "pooling needs even dimensions, got {}x{}",
            y.rows, y.cols
        )));
    }
    let acts = y
        .cells
        .iter()
        .map(|c| approx_relu(ev, c, act, mode))
        .collect::<Result<Vec<_>>>()?;
    let acts = CipherMatrix::new(y.rows, y.cols, y.batch, acts)?;
    let (rows, cols) = (y.rows / 2, y.cols / 2);
    let mut cells = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let w = window(i, j).map(|(r, c)| acts.get(r, c));
            cells.push(pool_window(ev, w, mode)?);
        }
    }
    CipherMatrix::new(rows, cols, y.batch, cells)
}

/// Flat position of `(i, j, c)`: row-major over the map, channel last.
pub fn flatten_index(i: usize, j: usize, c: usize, cols: usize, channels: usize) -> usize {
    (i * cols + j) * channels + c
}

/// Re-indexes per-channel maps into one list. No homomorphic work.
pub fn flatten<C: CipherText>(maps: Vec<CipherMatrix<C>>) -> Result<Vec<C>> {
    let Some(first) = maps.first() else {
        return Ok(Vec::new());
    };
    let (rows, cols) = (first.rows, first.cols);
    if maps.iter().any(|m| m.rows != rows || m.cols != cols) {
        return Err(Error::Dimension("flatten over maps of different sizes".into()));
    }
    let channels = maps.len();
    let mut slots: Vec<Option<C>> = (0..rows * cols * channels).map(|_| None).collect();
    for (c, m) in maps.into_iter().enumerate() {
        for (cell, ct) in m.cells.into_iter().enumerate() {
            slots[flatten_index(cell / cols, cell % cols, c, cols, channels)] = Some(ct);
        }
    }
    Ok(slots.into_iter().map(|c| c.expect("every index filled")).collect())
}

/// Broadcast-encrypted dense weights, `w[i * out_dim + r]`.
#[derive(Debug, Clone)]
pub struct DenseWeights<C> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<C>,
    pub bias: Option<Vec<C>>,
}

impl<C> DenseWeights<C> {
    pub fn get(&self, i: usize, r: usize) -> &C {
        &self.w[i * self.out_dim + r]
    }

    pub fn blocks(&self) -> usize {
        self.in_dim.div_ceil(DENSE_BLOCK)
    }
}

/// Partial dot product of class `r` over input block `b`.
pub fn dense_block<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    x: &[Ct<B>],
    w: &DenseWeights<Ct<B>>,
    r: usize,
    b: usize,
) -> Result<Ct<B>> {
    let range = b * DENSE_BLOCK..((b + 1) * DENSE_BLOCK).min(w.in_dim);
    let xs: Vec<&Ct<B>> = x[range.clone()].iter().collect();
    let ws: Vec<&Ct<B>> = range.map(|i| w.get(i, r)).collect();
    ev.inner_product(&xs, &ws)
}

/// Sums block partials in ascending order and adds the class bias.
pub fn dense_combine<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    partials: &[Ct<B>],
    w: &DenseWeights<Ct<B>>,
    r: usize,
) -> Result<Ct<B>> {
    let mut acc = partials[0].clone();
    for p in &partials[1..] {
        acc = ev.add(&acc, p)?;
    }
    match &w.bias {
        Some(bias) => {
            let term = ev.mul_const_to_scale(&bias[r], 1.0, acc.scale())?;
            ev.add(&acc, &term)
        }
        None => Ok(acc),
    }
}

fn check_dense_dims<C>(x: &[C], w: &DenseWeights<C>) -> Result<()> {
    if x.len() != w.in_dim || w.w.len() != w.in_dim * w.out_dim || w.in_dim == 0 {
        return Err(Error::Dimension(format!(
            "dense layer {}x{} applied to {} inputs",
            w.in_dim,
            w.out_dim,
            x.len()
        )));
    }
    if w.bias.as_ref().is_some_and(|b| b.len() != w.out_dim) {
        return Err(Error::Dimension("dense bias length differs from output size".into()));
    }
    Ok(())
}

/// `out[r] = Σ_i x[i] * w[i][r] + bias[r]`; no output activation. Consumes one level.
pub fn dense_enc<B: HeBackend>(
    ev: &Evaluator<'_, B>,
    x: &[Ct<B>],
    w: &DenseWeights<Ct<B>>,
) -> Result<Vec<Ct<B>>> {
    check_dense_dims(x, w)?;
    (0..w.out_dim)
        .map(|r| {
            let partials = (0..w.blocks())
                .map(|b| dense_block(ev, x, w, r, b))
                .collect::<Result<Vec<_>>>()?;
            dense_combine(ev, &partials, w, r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{KeySet, OpCounters, PlainVec};
    use crate::params::derive_params;
    use crate::reference::RefBackend;

    fn setup(l: u32) -> (RefBackend, KeySet<RefBackend>) {
        let b = RefBackend::new(derive_params(32, l, 30, 5).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        (b, k)
    }

    fn enc(b: &RefBackend, k: &KeySet<RefBackend>, v: f64) -> Ct<RefBackend> {
        b.encrypt(&k.public, &PlainVec::broadcast(v, 2f64.powi(30)), &mut rand::rng()).unwrap()
    }

    fn dec(b: &RefBackend, k: &KeySet<RefBackend>, c: &Ct<RefBackend>) -> f64 {
        b.decrypt(&k.secret, c).unwrap().to_vec(1)[0]
    }

    fn matrix(b: &RefBackend, k: &KeySet<RefBackend>, rows: usize, cols: usize, v: &[f64]) -> CipherMatrix<Ct<RefBackend>> {
        CipherMatrix::new(rows, cols, 1, v.iter().map(|&x| enc(b, k, x)).collect()).unwrap()
    }

    #[test]
    fn cross_correlation_without_flip() {
        let (b, k) = setup(300);
        let c = OpCounters::new();
        let ev = Evaluator::new(&b, &k.eval, &c);
        let x = matrix(&b, &k, 3, 3, &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let ker = CipherKernel {
            rows: 2,
            cols: 2,
            cells: [1., 0., 0., 1.].iter().map(|&w| enc(&b, &k, w)).collect(),
            bias: None,
        };
        let y = conv2d_enc(&ev, &x, &ker).unwrap();
        let got: Vec<f64> = y.cells.iter().map(|c| dec(&b, &k, c)).collect();
        assert_eq!(got, vec![6., 8., 12., 14.]);
        assert_eq!(y.level(), b.max_level() - 1);
        let n = c.snapshot();
        assert_eq!((n.ctct_mult, n.ctct_add), (16, 12));
    }

    #[test]
    fn activation_values() {
        let (b, k) = setup(300);
        let c = OpCounters::new();
        let ev = Evaluator::new(&b, &k.eval, &c);
        let g = |y: f64, s: f64| {
            let out = approx_relu(&ev, &enc(&b, &k, y), &PolyActivation::with_scale(s), PoolMode::Explicit).unwrap();
            assert_eq!(out.level(), b.max_level() - 2);
            dec(&b, &k, &out)
        };
        assert!((g(0.0, 1.0) - 0.47).abs() < 1e-12);
        assert!((g(1.0, 1.0) - 1.06).abs() < 1e-12);
        assert!((g(2.0, 2.0) - 2.12).abs() < 1e-12);
        let r2 = 2f64.sqrt();
        assert!((g(-r2, 1.0) - (0.47 - 0.50 * r2 + 0.18)).abs() < 1e-12);
    }

    #[test]
    fn window_mean() {
        let (b, k) = setup(300);
        let c = OpCounters::new();
        let ev = Evaluator::new(&b, &k.eval, &c);
        for mode in [PoolMode::Explicit, PoolMode::Folded] {
            let y = matrix(&b, &k, 2, 2, &[1., 1., 0., 0.]);
            let out = act_pool(&ev, &y, &PolyActivation::default(), mode).unwrap();
            assert_eq!((out.rows, out.cols), (1, 1));
            assert!((dec(&b, &k, &out.cells[0]) - 0.765).abs() < 1e-12);
            assert_eq!(out.level(), b.max_level() - mode.actpool_levels());
        }
    }

    #[test]
    fn odd_pool_dims_rejected() {
        let (b, k) = setup(300);
        let c = OpCounters::new();
        let ev = Evaluator::new(&b, &k.eval, &c);
        let y = matrix(&b, &k, 3, 2, &[0.; 6]);
        assert!(act_pool(&ev, &y, &PolyActivation::default(), PoolMode::Explicit).is_err());
    }

    #[test]
    fn flatten_order() {
        let (b, k) = setup(200);
        let maps: Vec<_> = (0..3)
            .map(|c| matrix(&b, &k, 2, 2, &[0., 1., 2., 3.].map(|v| v * 10.0 + c as f64)))
            .collect();
        let flat = flatten(maps).unwrap();
        let got: Vec<f64> = flat.iter().map(|c| dec(&b, &k, c)).collect();
        assert_eq!(got, vec![0., 1., 2., 10., 11., 12., 20., 21., 22., 30., 31., 32.]);
        assert_eq!(flatten_index(2, 5, 3, 13, 28), 871);
    }

    #[test]
    fn dense_dot_product() {
        let (b, k) = setup(200);
        let c = OpCounters::new();
        let ev = Evaluator::new(&b, &k.eval, &c);
        let x: Vec<_> = [1., 2., 3.].iter().map(|&v| enc(&b, &k, v)).collect();
        let w = DenseWeights {
            in_dim: 3,
            out_dim: 1,
            w: [1., 0., -1.].iter().map(|&v| enc(&b, &k, v)).collect(),
            bias: None,
        };
        let out = dense_enc(&ev, &x, &w).unwrap();
        assert_eq!(dec(&b, &k, &out[0]), -2.0);
        assert_eq!(c.snapshot().ctct_mult, 3);
    }
}
