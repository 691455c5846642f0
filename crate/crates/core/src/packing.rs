//! Batch-across-slots packing: one ciphertext per pixel position, slot `j`
//! holding that pixel of image `j`. Weights are broadcast to every slot.

use rayon::prelude::*;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::backend::{CipherText, HeBackend, PlainVec};
use crate::error::{Error, Result};
use crate::rng;
use crate::wire::{self, ArtifactKind};

/// Grayscale images of uniform size, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels, one vector per image.
    pub images: Vec<Vec<f64>>,
}

impl ImageBatch {
    pub fn new(rows: usize, cols: usize, images: Vec<Vec<f64>>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension("images must be non-empty".into()));
        }
        if let Some((i, img)) = images.iter().enumerate().find(|(_, im)| im.len() != rows * cols) {
            return Err(Error::Dimension(format!(
                "image {i} has {} pixels, expected {rows}x{cols}",
                img.len()
            )));
        }
        Ok(Self { rows, cols, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn pixel(&self, image: usize, row: usize, col: usize) -> f64 {
        self.images[image][row * self.cols + col]
    }

    /// First `n` images.
    pub fn take(&self, n: usize) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            images: self.images.iter().take(n).cloned().collect(),
        }
    }
}

/// Row-major grid of ciphertexts; all cells share level and scale.
#[derive(Debug, Clone)]
pub struct CipherMatrix<C> {
    pub rows: usize,
    pub cols: usize,
    /// Number of meaningful slots (images).
    pub batch: usize,
    pub cells: Vec<C>,
}

impl<C: CipherText> CipherMatrix<C> {
    pub fn new(rows: usize, cols: usize, batch: usize, cells: Vec<C>) -> Result<Self> {
        if cells.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} cells for a {rows}x{cols} grid",
                cells.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            batch,
            cells,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> &C {
        &self.cells[row * self.cols + col]
    }

    pub fn level(&self) -> usize {
        self.cells.iter().map(|c| c.level()).min().unwrap_or(0)
    }

    pub fn byte_size(&self) -> usize {
        self.cells.iter().map(|c| c.byte_size()).sum()
    }
}

/// `P x Q` broadcast weights of one filter, plus an optional broadcast bias.
#[derive(Debug, Clone)]
pub struct CipherKernel<C> {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<C>,
    pub bias: Option<C>,
}

impl<C> CipherKernel<C> {
    pub fn get(&self, p: usize, q: usize) -> &C {
        &self.cells[p * self.cols + q]
    }

    pub fn ciphertext_count(&self) -> usize {
        self.cells.len() + usize::from(self.bias.is_some())
    }
}

/// Encrypts one broadcast scalar on its own deterministic stream.
pub fn encrypt_scalar<B: HeBackend>(
    backend: &B,
    pk: &B::PublicKey,
    value: f64,
    level: usize,
    seed: u64,
    label: &str,
    index: u64,
) -> Result<B::Ciphertext> {
    if !value.is_finite() {
        return Err(Error::Model(format!("non-finite weight {value}")));
    }
    let scale = backend.params().default_scale();
    backend.encrypt_at(pk, &PlainVec::broadcast(value, scale), level, &mut rng::stream(seed, label, index))
}

/// Key an input batch is encrypted under.
pub enum InputKey<'a, B: HeBackend> {
    Public(&'a B::PublicKey),
    /// The end user encrypting their own images; lower fresh noise.
    Secret(&'a B::SecretKey),
}

impl<B: HeBackend> Clone for InputKey<'_, B> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<B: HeBackend> Copy for InputKey<'_, B> {}

/// Encrypts pixel `(m, n)` of every image into cell `(m, n)` at the top level.
/// Slots beyond the batch are zero.
pub fn pack_batch<B: HeBackend>(
    backend: &B,
    pk: &B::PublicKey,
    batch: &ImageBatch,
    seed: u64,
) -> Result<CipherMatrix<B::Ciphertext>> {
    pack_batch_with(backend, InputKey::Public(pk), batch, seed)
}

/// [`pack_batch`] under the secret key.
pub fn pack_batch_secret<B: HeBackend>(
    backend: &B,
    sk: &B::SecretKey,
    batch: &ImageBatch,
    seed: u64,
) -> Result<CipherMatrix<B::Ciphertext>> {
    pack_batch_with(backend, InputKey::Secret(sk), batch, seed)
}

pub fn pack_batch_with<B: HeBackend>(
    backend: &B,
    key: InputKey<'_, B>,
    batch: &ImageBatch,
    seed: u64,
) -> Result<CipherMatrix<B::Ciphertext>> {
    let k = backend.slots();
    if batch.len() > k {
        return Err(Error::SlotCount {
            expected: k,
            found: batch.len(),
        });
    }
    let scale = backend.params().default_scale();
    let top = backend.max_level();
    let cells = (0..batch.rows * batch.cols)
        .into_par_iter()
        .map(|cell| {
            let values: Vec<f64> = batch.images.iter().map(|img| img[cell]).collect();
            let pt = PlainVec::new(values, scale);
            let mut rng = rng::stream(seed, "input", cell as u64);
            match key {
                InputKey::Public(pk) => backend.encrypt_at(pk, &pt, top, &mut rng),
                InputKey::Secret(sk) => backend.encrypt_symmetric_at(sk, &pt, top, &mut rng),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    CipherMatrix::new(batch.rows, batch.cols, batch.len(), cells)
}

/// Broadcast-encrypts a `rows x cols` kernel (row-major) and optional bias.
#[allow(clippy::too_many_arguments)]
pub fn pack_kernel<B: HeBackend>(
    backend: &B,
    pk: &B::PublicKey,
    rows: usize,
    cols: usize,
    weights: &[f64],
    bias: Option<f64>,
    level: usize,
    seed: u64,
    label: &str,
) -> Result<CipherKernel<B::Ciphertext>> {
    if weights.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{} kernel weights for a {rows}x{cols} kernel",
            weights.len()
        )));
    }
    let cells = weights
        .par_iter()
        .enumerate()
        .map(|(i, &w)| encrypt_scalar(backend, pk, w, level, seed, label, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let bias = bias
        .map(|b| encrypt_scalar(backend, pk, b, level, seed, label, weights.len() as u64))
        .transpose()?;
    Ok(CipherKernel {
        rows,
        cols,
        cells,
        bias,
    })
}

/// Decrypts every cell and regroups slots per image: result `[image][cell]`.
pub fn unpack_batch<B: HeBackend>(
    backend: &B,
    sk: &B::SecretKey,
    cm: &CipherMatrix<B::Ciphertext>,
) -> Result<Vec<Vec<f64>>> {
    let decrypted = cm
        .cells
        .par_iter()
        .map(|c| backend.decrypt(sk, c).map(|p| p.to_vec(backend.slots())))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..cm.batch)
        .map(|j| decrypted.iter().map(|slots| slots[j]).collect())
        .collect())
}

/// Images as an [`ImageBatch`] (inverse of [`pack_batch`]).
pub fn unpack_images<B: HeBackend>(
    backend: &B,
    sk: &B::SecretKey,
    cm: &CipherMatrix<B::Ciphertext>,
) -> Result<ImageBatch> {
    ImageBatch::new(cm.rows, cm.cols, unpack_batch(backend, sk, cm)?)
}

pub fn write_cipher_matrix<B: HeBackend>(
    backend: &B,
    cm: &CipherMatrix<B::Ciphertext>,
    w: &mut dyn Write,
) -> Result<()> {
    wire::write_envelope(w, backend.envelope(ArtifactKind::CipherMatrix))?;
    wire::write_u32(w, cm.rows as u32)?;
    wire::write_u32(w, cm.cols as u32)?;
    wire::write_u32(w, cm.batch as u32)?;
    for c in &cm.cells {
        backend.write_ciphertext_payload(c, w)?;
    }
    Ok(())
}

pub fn read_cipher_matrix<B: HeBackend>(
    backend: &B,
    r: &mut dyn Read,
) -> Result<CipherMatrix<B::Ciphertext>> {
    backend.expect(r, ArtifactKind::CipherMatrix)?;
    let rows = wire::read_u32(r)? as usize;
    let cols = wire::read_u32(r)? as usize;
    let batch = wire::read_u32(r)? as usize;
    if batch > backend.slots() || rows.saturating_mul(cols) > 1 << 24 {
        return Err(Error::Format(format!("implausible matrix header {rows}x{cols}, batch {batch}")));
    }
    let cells = (0..rows * cols)
        .map(|_| backend.read_ciphertext_payload(r))
        .collect::<Result<Vec<_>>>()?;
    CipherMatrix::new(rows, cols, batch, cells)
}

pub fn save_cipher_matrix<B: HeBackend>(
    backend: &B,
    cm: &CipherMatrix<B::Ciphertext>,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cipher_matrix(backend, cm, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_cipher_matrix<B: HeBackend>(
    backend: &B,
    path: &Path,
) -> Result<CipherMatrix<B::Ciphertext>> {
    read_cipher_matrix(backend, &mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::derive_params;
    use crate::reference::RefBackend;

    #[test]
    fn cell_holds_pixel_of_every_image() {
        let b = RefBackend::new(derive_params(32, 200, 30, 0).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        let batch = ImageBatch::new(2, 2, vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.5, 0.6, 0.7, 0.8]]).unwrap();
        let cm = pack_batch(&b, &k.public, &batch, 1).unwrap();
        assert_eq!(cm.cells.len(), 4);
        let slots = b.decrypt(&k.secret, cm.get(1, 1)).unwrap().to_vec(b.slots());
        assert_eq!(slots, vec![0.4, 0.8, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(unpack_images(&b, &k.secret, &cm).unwrap(), batch);
    }

    #[test]
    fn batch_larger_than_slots_is_rejected() {
        let b = RefBackend::new(derive_params(16, 200, 30, 0).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        let batch = ImageBatch::new(1, 1, vec![vec![0.0]; 5]).unwrap();
        assert!(matches!(pack_batch(&b, &k.public, &batch, 0), Err(Error::SlotCount { .. })));
    }

    #[test]
    fn kernel_counts() {
        let b = RefBackend::new(derive_params(32, 200, 30, 0).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        let ker = pack_kernel(&b, &k.public, 3, 3, &[0.5; 9], Some(1.0), b.max_level(), 0, "k").unwrap();
        assert_eq!(ker.cells.len(), 9);
        assert_eq!(ker.ciphertext_count(), 10);
        let slots = b.decrypt(&k.secret, ker.get(2, 2)).unwrap().to_vec(b.slots());
        assert!(slots.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn matrix_file_roundtrip() {
        let b = RefBackend::new(derive_params(32, 200, 30, 0).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        let batch = ImageBatch::new(1, 3, vec![vec![0.25, 0.5, 0.75]]).unwrap();
        let cm = pack_batch(&b, &k.public, &batch, 1).unwrap();
        let mut buf = Vec::new();
        write_cipher_matrix(&b, &cm, &mut buf).unwrap();
        let back = read_cipher_matrix(&b, &mut buf.as_slice()).unwrap();
        assert_eq!(back.cells, cm.cells);
        assert_eq!((back.rows, back.cols, back.batch), (1, 3, 1));
    }

    #[test]
    fn ragged_batch_rejected() {
        assert!(ImageBatch::new(2, 2, vec![vec![0.0; 4], vec![0.0; 3]]).is_err());
    }
}
