//! Model description (JSON manifest + raw f64 weight blob), the plaintext
//! forward pass used as the oracle, and encryption of the weights under the
//! end user's public key. The architecture always stays in the clear.
//!
//! Supported topology: `conv2d? actpool? flatten dense`. Weight layouts are
//! channel-last: conv `[p][q][filter]`, dense `[input][class]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::backend::HeBackend;
use crate::error::{Error, Result};
use crate::layers::{flatten_index, window, DenseWeights, PolyActivation, PoolMode, DENSE_BLOCK};
use crate::packing::{encrypt_scalar, CipherKernel, ImageBatch};
use crate::wire;

pub const MODEL_MAGIC: &str = "HECNNMDL";
pub const MODEL_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub filters: usize,
    pub rows: usize,
    pub cols: usize,
    /// `[p][q][filter]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv2d {
    pub fn weight(&self, p: usize, q: usize, f: usize) -> f64 {
        self.weights[(p * self.cols + q) * self.filters + f]
    }

    /// Row-major `P x Q` kernel of one filter.
    pub fn kernel(&self, f: usize) -> Vec<f64> {
        (0..self.rows)
            .flat_map(|p| (0..self.cols).map(move |q| (p, q)))
            .map(|(p, q)| self.weight(p, q, f))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `[input][class]`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    ActPool { act: PolyActivation, mode: PoolMode },
    Flatten,
    Dense(Dense),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::ActPool { .. } => "actpool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDesc {
    pub input_rows: usize,
    pub input_cols: usize,
    pub layers: Vec<Layer>,
}

/// Span of a tensor inside the weight blob, in f64 elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blob {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        filters: usize,
        kernel_rows: usize,
        kernel_cols: usize,
        weights: Blob,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Blob>,
    },
    Actpool {
        a0: f64,
        a1: f64,
        a2: f64,
        s: f64,
        #[serde(default)]
        pool_mode: PoolMode,
    },
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
        weights: Blob,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Blob>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub rows: usize,
    pub cols: usize,
}

/// The architecture as stored on disk, without weight values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input: InputDims,
    pub layers: Vec<LayerSpec>,
    pub weights_file: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub filters: usize,
    pub rows: usize,
    pub cols: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenseShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub bias: bool,
}

/// Validated dimension chain of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub input: (usize, usize),
    pub conv: Option<ConvShape>,
    /// Convolution output `(rows, cols, channels)`, or the input as one channel.
    pub conv_out: (usize, usize, usize),
    pub act: Option<(PolyActivation, PoolMode)>,
    /// Maps entering the flatten layer.
    pub maps: (usize, usize, usize),
    pub dense: DenseShape,
    /// Layer kinds in manifest order.
    pub layers: Vec<&'static str>,
}

impl Topology {
    pub fn from_manifest(m: &Manifest) -> Result<Self> {
        if m.format != MODEL_MAGIC || m.version != MODEL_VERSION {
            return Err(Error::Model(format!("unsupported model format {} v{}", m.format, m.version)));
        }
        let (rows, cols) = (m.input.rows, m.input.cols);
        if rows == 0 || cols == 0 {
            return Err(Error::Model("input dimensions must be positive".into()));
        }
        if m.layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        let mut it = m.layers.iter().peekable();
        let mut names = Vec::new();
        let mut conv = None;
        let mut conv_out = (rows, cols, 1);
        if let Some(LayerSpec::Conv2d {
            filters,
            kernel_rows,
            kernel_cols,
            bias,
            ..
        }) = it.peek()
        {
            if *filters == 0 || *kernel_rows == 0 || *kernel_cols == 0 {
                return Err(Error::Model("conv2d dimensions must be positive".into()));
            }
            if *kernel_rows > rows || *kernel_cols > cols {
                return Err(Error::Model(format!(
                    "{kernel_rows}x{kernel_cols} kernel larger than the {rows}x{cols} input"
                )));
            }
            conv = Some(ConvShape {
                filters: *filters,
                rows: *kernel_rows,
                cols: *kernel_cols,
                bias: bias.is_some(),
            });
            conv_out = (rows - kernel_rows + 1, cols - kernel_cols + 1, *filters);
            names.push("conv2d");
            it.next();
        }
        let mut act = None;
        let mut maps = conv_out;
        if let Some(LayerSpec::Actpool { a0, a1, a2, s, pool_mode }) = it.peek() {
            let a = PolyActivation {
                a0: *a0,
                a1: *a1,
                a2: *a2,
                s: *s,
            };
            a.validate()?;
            if conv_out.0 % 2 != 0 || conv_out.1 % 2 != 0 {
                return Err(Error::Model(format!(
                    "actpool needs even dimensions, got {}x{}",
                    conv_out.0, conv_out.1
                )));
            }
            act = Some((a, *pool_mode));
            maps = (conv_out.0 / 2, conv_out.1 / 2, conv_out.2);
            names.push("actpool");
            it.next();
        }
        if !matches!(it.next(), Some(LayerSpec::Flatten)) {
            return Err(Error::Model(
                "expected layers conv2d? actpool? flatten dense in this order".into(),
            ));
        }
        names.push("flatten");
        let dense = match it.next() {
            Some(LayerSpec::Dense {
                in_dim,
                out_dim,
                bias,
                ..
            }) => DenseShape {
                in_dim: *in_dim,
                out_dim: *out_dim,
                bias: bias.is_some(),
            },
            _ => return Err(Error::Model("flatten must be followed by a dense layer".into())),
        };
        names.push("dense");
        if it.next().is_some() {
            return Err(Error::Model("no layer may follow the dense layer".into()));
        }
        let flat = maps.0 * maps.1 * maps.2;
        if dense.in_dim != flat {
            return Err(Error::Model(format!(
                "dense expects {} inputs but flatten yields {flat}",
                dense.in_dim
            )));
        }
        if dense.out_dim == 0 {
            return Err(Error::Model("dense layer needs at least one class".into()));
        }
        Ok(Self {
            input: (rows, cols),
            conv,
            conv_out,
            act,
            maps,
            dense,
            layers: names,
        })
    }

    pub fn flat_len(&self) -> usize {
        self.maps.0 * self.maps.1 * self.maps.2
    }

    pub fn classes(&self) -> usize {
        self.dense.out_dim
    }

    /// Levels consumed by each layer, in manifest order.
    pub fn layer_levels(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|&n| match n {
                "conv2d" | "dense" => 1,
                "actpool" => self.act.map_or(0, |(_, m)| m.actpool_levels()),
                _ => 0,
            })
            .collect()
    }

    pub fn depth(&self) -> usize {
        self.layer_levels().iter().sum()
    }

    /// Level at which the dense weights are consumed, for inputs at `top`.
    pub fn dense_level(&self, top: usize) -> Result<usize> {
        let before = self.depth() - 1;
        top.checked_sub(before)
            .filter(|&l| l >= 1)
            .ok_or(Error::DepthExhausted)
    }

    /// Ciphertexts in an encrypted model.
    pub fn weight_ciphertexts(&self) -> usize {
        let conv = self
            .conv
            .map_or(0, |c| c.filters * (c.rows * c.cols + usize::from(c.bias)));
        let d = self.dense;
        conv + d.in_dim * d.out_dim + if d.bias { d.out_dim } else { 0 }
    }
}

impl Manifest {
    /// The MNIST CNN: 28x28 input,
    /// 28 filters of 3x3, actpool, dense 4732 x 10 with bias.
    pub fn mnist_cnn() -> Self {
        Self::canonical(28, 28, 28, 3, 10, true, false, PolyActivation::default())
    }

    /// `conv2d(filters, k x k) actpool flatten dense(classes)` with blob
    /// offsets laid out consecutively.
    #[allow(clippy::too_many_arguments)]
    pub fn canonical(
        rows: usize,
        cols: usize,
        filters: usize,
        kernel: usize,
        classes: usize,
        dense_bias: bool,
        conv_bias: bool,
        act: PolyActivation,
    ) -> Self {
        let flat = (rows - kernel).div_ceil(2) * (cols - kernel).div_ceil(2) * filters;
        let mut off = 0;
        let mut blob = |len: usize| {
            let b = Blob { offset: off, len };
            off += len;
            b
        };
        let conv_w = blob(kernel * kernel * filters);
        let conv_b = conv_bias.then(|| blob(filters));
        let dense_w = blob(flat * classes);
        let dense_b = dense_bias.then(|| blob(classes));
        Self {
            format: MODEL_MAGIC.into(),
            version: MODEL_VERSION,
            input: InputDims { rows, cols },
            layers: vec![
                LayerSpec::Conv2d {
                    filters,
                    kernel_rows: kernel,
                    kernel_cols: kernel,
                    weights: conv_w,
                    bias: conv_b,
                },
                LayerSpec::Actpool {
                    a0: act.a0,
                    a1: act.a1,
                    a2: act.a2,
                    s: act.s,
                    pool_mode: PoolMode::Explicit,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    in_dim: flat,
                    out_dim: classes,
                    weights: dense_w,
                    bias: dense_b,
                },
            ],
            weights_file: WEIGHTS_FILE.into(),
        }
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::from_manifest(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Model(format!("{name} contains non-finite values")));
    }
    Ok(())
}

fn slice_blob<'a>(blob: &'a [f64], b: &Blob, what: &str) -> Result<&'a [f64]> {
    blob.get(b.offset..b.offset + b.len)
        .ok_or_else(|| Error::Model(format!("{what} blob [{}, +{}) beyond weight file", b.offset, b.len)))
}

impl ModelDesc {
    /// Builds and validates a model from its manifest and weight blob.
    pub fn from_parts(m: &Manifest, blob: &[f64]) -> Result<Self> {
        m.topology()?;
        let mut layers = Vec::new();
        for spec in &m.layers {
            layers.push(match spec {
                LayerSpec::Conv2d {
                    filters,
                    kernel_rows,
                    kernel_cols,
                    weights,
                    bias,
                } => Layer::Conv2d(Conv2d {
                    filters: *filters,
                    rows: *kernel_rows,
                    cols: *kernel_cols,
                    weights: slice_blob(blob, weights, "conv2d weights")?.to_vec(),
                    bias: bias.map(|b| slice_blob(blob, &b, "conv2d bias").map(<[f64]>::to_vec)).transpose()?,
                }),
                LayerSpec::Actpool { a0, a1, a2, s, pool_mode } => Layer::ActPool {
                    act: PolyActivation {
                        a0: *a0,
                        a1: *a1,
                        a2: *a2,
                        s: *s,
                    },
                    mode: *pool_mode,
                },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Dense {
                    in_dim,
                    out_dim,
                    weights,
                    bias,
                } => Layer::Dense(Dense {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                    weights: slice_blob(blob, weights, "dense weights")?.to_vec(),
                    bias: bias.map(|b| slice_blob(blob, &b, "dense bias").map(<[f64]>::to_vec)).transpose()?,
                }),
            });
        }
        let model = Self {
            input_rows: m.input.rows,
            input_cols: m.input.cols,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    /// Manifest and blob with tensors laid out in layer order.
    pub fn to_parts(&self) -> (Manifest, Vec<f64>) {
        let mut blob = Vec::new();
        let mut push = |v: &[f64]| {
            let b = Blob {
                offset: blob.len(),
                len: v.len(),
            };
            blob.extend_from_slice(v);
            b
        };
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => LayerSpec::Conv2d {
                    filters: c.filters,
                    kernel_rows: c.rows,
                    kernel_cols: c.cols,
                    weights: push(&c.weights),
                    bias: c.bias.as_deref().map(&mut push),
                },
                Layer::ActPool { act, mode } => LayerSpec::Actpool {
                    a0: act.a0,
                    a1: act.a1,
                    a2: act.a2,
                    s: act.s,
                    pool_mode: *mode,
                },
                Layer::Flatten => LayerSpec::Flatten,
                Layer::Dense(d) => LayerSpec::Dense {
                    in_dim: d.in_dim,
                    out_dim: d.out_dim,
                    weights: push(&d.weights),
                    bias: d.bias.as_deref().map(&mut push),
                },
            })
            .collect();
        let manifest = Manifest {
            format: MODEL_MAGIC.into(),
            version: MODEL_VERSION,
            input: InputDims {
                rows: self.input_rows,
                cols: self.input_cols,
            },
            layers,
            weights_file: WEIGHTS_FILE.into(),
        };
        (manifest, blob)
    }

    pub fn manifest(&self) -> Manifest {
        self.to_parts().0
    }

    pub fn topology(&self) -> Result<Topology> {
        self.manifest().topology()
    }

    pub fn validate(&self) -> Result<Topology> {
        let topo = self.topology()?;
        for l in &self.layers {
            match l {
                Layer::Conv2d(c) => {
                    if c.weights.len() != c.rows * c.cols * c.filters {
                        return Err(Error::Model("conv2d weight count does not match its shape".into()));
                    }
                    check_finite("conv2d weights", &c.weights)?;
                    if let Some(b) = &c.bias {
                        if b.len() != c.filters {
                            return Err(Error::Model("conv2d bias length differs from filter count".into()));
                        }
                        check_finite("conv2d bias", b)?;
                    }
                }
                Layer::Dense(d) => {
                    if d.weights.len() != d.in_dim * d.out_dim {
                        return Err(Error::Model("dense weight count does not match its shape".into()));
                    }
                    check_finite("dense weights", &d.weights)?;
                    if let Some(b) = &d.bias {
                        if b.len() != d.out_dim {
                            return Err(Error::Model("dense bias length differs from class count".into()));
                        }
                        check_finite("dense bias", b)?;
                    }
                }
                _ => {}
            }
        }
        Ok(topo)
    }

    pub fn conv(&self) -> Option<&Conv2d> {
        self.layers.iter().find_map(|l| match l {
            Layer::Conv2d(c) => Some(c),
            _ => None,
        })
    }

    pub fn dense(&self) -> &Dense {
        self.layers
            .iter()
            .find_map(|l| match l {
                Layer::Dense(d) => Some(d),
                _ => None,
            })
            .expect("validated model has a dense layer")
    }

    pub fn activation(&self) -> Option<(PolyActivation, PoolMode)> {
        self.layers.iter().find_map(|l| match l {
            Layer::ActPool { act, mode } => Some((*act, *mode)),
            _ => None,
        })
    }

    /// Random weights for a canonical architecture. Conv weights are uniform
    /// in `[-0.5, 0.5]` and the activation scale `s` is set to the worst-case
    /// pre-activation magnitude over `√2`, so `|y / s| ≤ √2` for inputs in `[0, 1]`.
    pub fn random(manifest: &Manifest, seed: u64) -> Result<Self> {
        let topo = manifest.topology()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let total = manifest
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv2d { weights, bias, .. } | LayerSpec::Dense { weights, bias, .. } => {
                    weights.offset + weights.len + bias.map_or(0, |b| b.len)
                }
                _ => 0,
            })
            .max()
            .unwrap_or(0);
        let blob: Vec<f64> = (0..total).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut model = Self::from_parts(manifest, &blob)?;
        if let (Some(c), Some(_)) = (topo.conv, topo.act) {
            let conv = model.conv().unwrap().clone();
            let worst = (0..c.filters)
                .map(|f| {
                    let w: f64 = conv.kernel(f).iter().map(|x| x.abs()).sum();
                    w + conv.bias.as_ref().map_or(0.0, |b| b[f].abs())
                })
                .fold(0.0, f64::max);
            let s = (worst / 2f64.sqrt()).max(1e-3);
            for l in &mut model.layers {
                if let Layer::ActPool { act, .. } = l {
                    act.s = s;
                }
            }
        }
        Ok(model)
    }

    pub fn with_pool_mode(mut self, mode: PoolMode) -> Self {
        for l in &mut self.layers {
            if let Layer::ActPool { mode: m, .. } = l {
                *m = mode;
            }
        }
        self
    }
}

/// Writes `model.json` and `weights.bin` into `dir`. Byte-for-byte deterministic.
pub fn save_model(model: &ModelDesc, dir: &Path) -> Result<()> {
    model.validate()?;
    fs::create_dir_all(dir)?;
    let (manifest, blob) = model.to_parts();
    fs::write(dir.join(MANIFEST_FILE), manifest.to_json()? + "\n")?;
    let bytes: Vec<u8> = blob.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(dir.join(&manifest.weights_file), bytes)?;
    Ok(())
}

/// Resolves a model path: a directory holding `model.json`, or the manifest itself.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(manifest_path(path))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Model(format!("malformed manifest: {e}")))?;
    m.topology()?;
    Ok(m)
}

pub fn load_model(path: &Path) -> Result<ModelDesc> {
    let mpath = manifest_path(path);
    let manifest = load_manifest(&mpath)?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&manifest.weights_file))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Model("weight file length is not a multiple of 8".into()));
    }
    let blob: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ModelDesc::from_parts(&manifest, &blob)
}

/// Reference forward pass over clear images, logits `[image][class]`.
///
/// Arithmetic follows the encrypted pipeline operation by operation (same
/// association order for every sum), so the exact simulator reproduces it
/// bit for bit.
pub fn plaintext_forward(model: &ModelDesc, batch: &ImageBatch) -> Result<Vec<Vec<f64>>> {
    let topo = model.validate()?;
    if (batch.rows, batch.cols) != topo.input {
        return Err(Error::Dimension(format!(
            "images are {}x{}, model expects {}x{}",
            batch.rows, batch.cols, topo.input.0, topo.input.1
        )));
    }
    Ok(batch
        .images
        .iter()
        .map(|img| forward_one(model, &topo, img))
        .collect())
}

fn forward_one(model: &ModelDesc, topo: &Topology, img: &[f64]) -> Vec<f64> {
    let (rows, cols) = topo.input;
    let (cr, cc, channels) = topo.conv_out;
    // maps[c][i * cc + j]
    let mut maps: Vec<Vec<f64>> = match model.conv() {
        Some(conv) => (0..conv.filters)
            .map(|f| {
                let mut out = Vec::with_capacity(cr * cc);
                for i in 0..cr {
                    for j in 0..cc {
                        let mut acc = img[i * cols + j] * conv.weight(0, 0, f);
                        for p in 0..conv.rows {
                            for q in 0..conv.cols {
                                if p == 0 && q == 0 {
                                    continue;
                                }
                                acc += img[(i + p) * cols + (j + q)] * conv.weight(p, q, f);
                            }
                        }
                        if let Some(b) = &conv.bias {
                            acc += b[f] * 1.0;
                        }
                        out.push(acc);
                    }
                }
                out
            })
            .collect(),
        None => {
            debug_assert_eq!((rows, cols), (cr, cc));
            vec![img.to_vec()]
        }
    };
    let (mut mr, mut mc) = (cr, cc);
    if let Some((act, mode)) = model.activation() {
        let (c2, c1, c0) = act.folded(mode);
        let g = |y: f64| {
            let quad = (y * y) * c2;
            let lin = y * c1;
            (quad + lin) + c0
        };
        maps = maps
            .iter()
            .map(|m| {
                let a: Vec<f64> = m.iter().map(|&y| g(y)).collect();
                let mut out = Vec::with_capacity(mr * mc / 4);
                for i in 0..mr / 2 {
                    for j in 0..mc / 2 {
                        let w = window(i, j).map(|(r, c)| a[r * mc + c]);
                        let s = ((w[0] + w[1]) + w[2]) + w[3];
                        out.push(match mode {
                            PoolMode::Explicit => s * 0.25,
                            PoolMode::Folded => s,
                        });
                    }
                }
                out
            })
            .collect();
        mr /= 2;
        mc /= 2;
    }
    let mut flat = vec![0.0; mr * mc * channels];
    for (c, m) in maps.iter().enumerate() {
        for (cell, &v) in m.iter().enumerate() {
            flat[flatten_index(cell / mc, cell % mc, c, mc, channels)] = v;
        }
    }
    let dense = model.dense();
    (0..dense.out_dim)
        .map(|r| {
            let w = |i: usize| dense.weights[i * dense.out_dim + r];
            let partials: Vec<f64> = (0..dense.in_dim.div_ceil(DENSE_BLOCK))
                .map(|b| {
                    let lo = b * DENSE_BLOCK;
                    let hi = (lo + DENSE_BLOCK).min(dense.in_dim);
                    let mut acc = flat[lo] * w(lo);
                    for i in lo + 1..hi {
                        acc += flat[i] * w(i);
                    }
                    acc
                })
                .collect();
            let mut acc = partials[0];
            for p in &partials[1..] {
                acc += p;
            }
            if let Some(b) = &dense.bias {
                acc += b[r] * 1.0;
            }
            acc
        })
        .collect()
}

/// Index of the largest logit per image.
pub fn argmax(logits: &[f64]) -> usize {
    logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Difference between the two largest logits.
pub fn top2_margin(logits: &[f64]) -> f64 {
    let mut s = logits.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() < 2 {
        f64::INFINITY
    } else {
        s[0] - s[1]
    }
}

/// Weights encrypted under the end user's key; architecture in the clear.
pub struct EncryptedModel<B: HeBackend> {
    pub manifest: Manifest,
    pub topology: Topology,
    /// One kernel per filter (empty without a conv layer).
    pub kernels: Vec<CipherKernel<B::Ciphertext>>,
    pub dense: DenseWeights<B::Ciphertext>,
}

impl<B: HeBackend> EncryptedModel<B> {
    pub fn ciphertext_count(&self) -> usize {
        self.kernels.iter().map(|k| k.ciphertext_count()).sum::<usize>()
            + self.dense.w.len()
            + self.dense.bias.as_ref().map_or(0, Vec::len)
    }

    fn ciphertexts(&self) -> impl Iterator<Item = &B::Ciphertext> {
        self.kernels
            .iter()
            .flat_map(|k| k.cells.iter().chain(k.bias.iter()))
            .chain(self.dense.w.iter())
            .chain(self.dense.bias.iter().flatten())
    }
}

/// Broadcast-encrypts every weight. Conv weights sit at the top level, dense
/// weights at the level where the pipeline consumes them.
pub fn encrypt_model<B: HeBackend>(
    backend: &B,
    pk: &B::PublicKey,
    model: &ModelDesc,
    seed: u64,
) -> Result<EncryptedModel<B>> {
    let topology = model.validate()?;
    crate::backend::check_fingerprint(backend.params().fingerprint(), crate::backend::KeyTag::fingerprint(pk))?;
    let top = backend.max_level();
    if topology.depth() > top {
        return Err(Error::DepthExhausted);
    }
    let kernels = match model.conv() {
        Some(c) => (0..c.filters)
            .map(|f| {
                crate::packing::pack_kernel(
                    backend,
                    pk,
                    c.rows,
                    c.cols,
                    &c.kernel(f),
                    c.bias.as_ref().map(|b| b[f]),
                    top,
                    seed,
                    &format!("conv{f}"),
                )
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let d = model.dense();
    let level = topology.dense_level(top)?;
    let w = d
        .weights
        .par_iter()
        .enumerate()
        .map(|(i, &v)| encrypt_scalar(backend, pk, v, level, seed, "dense", i as u64))
        .collect::<Result<Vec<_>>>()?;
    let bias = d
        .bias
        .as_ref()
        .map(|b| {
            b.iter()
                .enumerate()
                .map(|(r, &v)| encrypt_scalar(backend, pk, v, level, seed, "dense-bias", r as u64))
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    Ok(EncryptedModel {
        manifest: model.manifest(),
        topology,
        kernels,
        dense: DenseWeights {
            in_dim: d.in_dim,
            out_dim: d.out_dim,
            w,
            bias,
        },
    })
}

/// `HECNNMDL`, version, manifest length, manifest JSON, ciphertext batch.
pub fn write_encrypted_model<B: HeBackend>(
    backend: &B,
    em: &EncryptedModel<B>,
    w: &mut dyn Write,
) -> Result<()> {
    let json = em.manifest.to_json()?;
    w.write_all(MODEL_MAGIC.as_bytes())?;
    wire::write_u32(w, MODEL_VERSION)?;
    wire::write_u64(w, json.len() as u64)?;
    w.write_all(json.as_bytes())?;
    wire::write_envelope(w, backend.envelope(wire::ArtifactKind::CiphertextBatch))?;
    wire::write_u64(w, em.ciphertext_count() as u64)?;
    for ct in em.ciphertexts() {
        backend.write_ciphertext_payload(ct, w)?;
    }
    Ok(())
}

pub fn read_encrypted_model<B: HeBackend>(backend: &B, r: &mut dyn Read) -> Result<EncryptedModel<B>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC.as_bytes() {
        return Err(Error::Format("not an encrypted model container".into()));
    }
    let version = wire::read_u32(r)?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let len = wire::read_u64(r)? as usize;
    if len > 1 << 26 {
        return Err(Error::Format("manifest too large".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let manifest: Manifest = serde_json::from_slice(&json)?;
    let topology = manifest.topology()?;
    backend.expect(r, wire::ArtifactKind::CiphertextBatch)?;
    let count = wire::read_u64(r)? as usize;
    if count != topology.weight_ciphertexts() {
        return Err(Error::Format(format!(
            "container holds {count} ciphertexts, architecture needs {}",
            topology.weight_ciphertexts()
        )));
    }
    let mut next = || backend.read_ciphertext_payload(r);
    let mut kernels = Vec::new();
    if let Some(c) = topology.conv {
        for _ in 0..c.filters {
            let cells = (0..c.rows * c.cols).map(|_| next()).collect::<Result<Vec<_>>>()?;
            let bias = if c.bias { Some(next()?) } else { None };
            kernels.push(CipherKernel {
                rows: c.rows,
                cols: c.cols,
                cells,
                bias,
            });
        }
    }
    let d = topology.dense;
    let w = (0..d.in_dim * d.out_dim).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let bias = if d.bias {
        Some((0..d.out_dim).map(|_| next()).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    Ok(EncryptedModel {
        manifest,
        topology,
        kernels,
        dense: DenseWeights {
            in_dim: d.in_dim,
            out_dim: d.out_dim,
            w,
            bias,
        },
    })
}

pub fn save_encrypted_model<B: HeBackend>(backend: &B, em: &EncryptedModel<B>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_encrypted_model(backend, em, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_encrypted_model<B: HeBackend>(backend: &B, path: &Path) -> Result<EncryptedModel<B>> {
    read_encrypted_model(backend, &mut BufReader::new(File::open(path)?))
}
