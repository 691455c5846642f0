//! Image and label files: IDX (`ubyte`, the MNIST distribution format) and a
//! raw f64 container `HECNIMGS` for already-normalised images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::packing::ImageBatch;

pub const IMAGES_MAGIC: &[u8; 8] = b"HECNIMGS";
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

fn le_u32(b: &[u8], at: usize) -> Result<u32> {
    b.get(at..at + 4)
        .map(|s| u32::from_le_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated image header".into()))
}

/// Parses IDX image bytes, scaling pixels to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageBatch> {
    if be_u32(bytes, 0)? != IDX_IMAGES {
        return Err(Error::Format("not an IDX image file".into()));
    }
    let (n, rows, cols) = (
        be_u32(bytes, 4)? as usize,
        be_u32(bytes, 8)? as usize,
        be_u32(bytes, 12)? as usize,
    );
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX body has {} bytes, header promises {n}x{rows}x{cols}",
            body.len()
        )));
    }
    let images = if rows * cols == 0 {
        Vec::new()
    } else {
        body.chunks_exact(rows * cols)
            .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
            .collect()
    };
    ImageBatch::new(rows, cols, images)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if be_u32(bytes, 0)? != IDX_LABELS {
        return Err(Error::Format("not an IDX label file".into()));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX label body has {} bytes, expected {n}", body.len())));
    }
    Ok(body.to_vec())
}

/// `HECNIMGS`, count, rows, cols (u32 LE), then f64 LE pixels.
pub fn encode_images(batch: &ImageBatch) -> Vec<u8> {
    let mut out = IMAGES_MAGIC.to_vec();
    for v in [batch.len(), batch.rows, batch.cols] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for px in batch.images.iter().flatten() {
        out.extend_from_slice(&px.to_le_bytes());
    }
    out
}

pub fn decode_images(bytes: &[u8]) -> Result<ImageBatch> {
    if bytes.get(..8) != Some(IMAGES_MAGIC) {
        return Err(Error::Format("not an HECNIMGS file".into()));
    }
    let (n, rows, cols) = (
        le_u32(bytes, 8)? as usize,
        le_u32(bytes, 12)? as usize,
        le_u32(bytes, 16)? as usize,
    );
    let body = &bytes[20..];
    if body.len() != n * rows * cols * 8 {
        return Err(Error::Format("HECNIMGS body length does not match header".into()));
    }
    let px: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if px.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("non-finite pixel".into()));
    }
    let images = if rows * cols == 0 {
        Vec::new()
    } else {
        px.chunks_exact(rows * cols).map(<[f64]>::to_vec).collect()
    };
    ImageBatch::new(rows, cols, images)
}

/// Loads either format, detected from the leading bytes.
pub fn load_images(path: &Path) -> Result<ImageBatch> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(IMAGES_MAGIC) {
        decode_images(&bytes)
    } else {
        parse_idx_images(&bytes)
    }
}

pub fn save_images(path: &Path, batch: &ImageBatch) -> Result<()> {
    fs::write(path, encode_images(batch))?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&fs::read(path)?)
}

/// Uniform pixels in `[0, 1)`.
pub fn random_images(rows: usize, cols: usize, n: usize, seed: u64) -> ImageBatch {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let images = (0..n)
        .map(|_| (0..rows * cols).map(|_| rng.random::<f64>()).collect())
        .collect();
    ImageBatch { rows, cols, images }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_images_scale_to_unit() {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 51, 102]);
        let batch = parse_idx_images(&b).unwrap();
        assert_eq!(batch.images, vec![vec![0.0, 1.0], vec![0.2, 0.4]]);
        assert!(parse_idx_images(&b[..19]).is_err());
    }

    #[test]
    fn idx_labels() {
        assert_eq!(parse_idx_labels(&[0, 0, 8, 1, 0, 0, 0, 2, 7, 3]).unwrap(), vec![7, 3]);
        assert!(parse_idx_labels(&[0, 0, 8, 3, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn f64_container_roundtrip() {
        let batch = random_images(3, 2, 4, 9);
        assert_eq!(decode_images(&encode_images(&batch)).unwrap(), batch);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        save_images(&p, &batch).unwrap();
        assert_eq!(load_images(&p).unwrap(), batch);
    }
}
