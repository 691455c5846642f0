//! Little-endian binary helpers shared by the on-disk formats.

use std::io::{Read, Write};

use crate::backend::BackendKind;
use crate::error::{Error, Result};

pub const ENVELOPE_MAGIC: &[u8; 4] = b"HECN";
pub const ENVELOPE_VERSION: u8 = 1;

/// Artifact kinds carried in the envelope header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactKind {
    Ciphertext = 1,
    SecretKey = 2,
    PublicKey = 3,
    EvalKey = 4,
    CiphertextBatch = 5,
    CipherMatrix = 6,
}

impl ArtifactKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Self::Ciphertext,
            2 => Self::SecretKey,
            3 => Self::PublicKey,
            4 => Self::EvalKey,
            5 => Self::CiphertextBatch,
            6 => Self::CipherMatrix,
            _ => return Err(Error::Format(format!("unknown artifact kind {v}"))),
        })
    }
}

pub fn write_u8(w: &mut dyn Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn write_u32(w: &mut dyn Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64(w: &mut dyn Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64(w: &mut dyn Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64s(w: &mut dyn Write, vs: &[u64]) -> Result<()> {
    write_u64(w, vs.len() as u64)?;
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_f64s(w: &mut dyn Write, vs: &[f64]) -> Result<()> {
    write_u64(w, vs.len() as u64)?;
    let mut buf = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_u8(r: &mut dyn Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u32(r: &mut dyn Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut dyn Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64(r: &mut dyn Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Length-prefixed vector; `max_len` guards against corrupt headers.
pub fn read_u64s(r: &mut dyn Read, max_len: usize) -> Result<Vec<u64>> {
    let len = read_len(r, max_len)?;
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
}

pub fn read_f64s(r: &mut dyn Read, max_len: usize) -> Result<Vec<f64>> {
    let len = read_len(r, max_len)?;
    let mut buf = vec![0u8; len * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_len(r: &mut dyn Read, max_len: usize) -> Result<usize> {
    let len = read_u64(r)? as usize;
    if len > max_len {
        return Err(Error::Format(format!("length {len} exceeds limit {max_len}")));
    }
    Ok(len)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Envelope {
    pub backend: BackendKind,
    pub kind: ArtifactKind,
    pub fingerprint: u64,
}

pub fn write_envelope(w: &mut dyn Write, env: Envelope) -> Result<()> {
    w.write_all(ENVELOPE_MAGIC)?;
    write_u8(w, ENVELOPE_VERSION)?;
    write_u8(w, env.backend.tag())?;
    write_u8(w, env.kind as u8)?;
    write_u64(w, env.fingerprint)
}

pub fn read_envelope(r: &mut dyn Read) -> Result<Envelope> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != ENVELOPE_MAGIC {
        return Err(Error::Format("bad magic, not an hecnn artifact".into()));
    }
    let version = read_u8(r)?;
    if version != ENVELOPE_VERSION {
        return Err(Error::Format(format!("unsupported envelope version {version}")));
    }
    let backend = BackendKind::from_tag(read_u8(r)?)?;
    let kind = ArtifactKind::from_u8(read_u8(r)?)?;
    let fingerprint = read_u64(r)?;
    Ok(Envelope {
        backend,
        kind,
        fingerprint,
    })
}

/// Reads an envelope and checks it against what the caller expects.
pub fn expect_envelope(
    r: &mut dyn Read,
    backend: BackendKind,
    kind: ArtifactKind,
    fingerprint: u64,
) -> Result<()> {
    let env = read_envelope(r)?;
    if env.backend != backend {
        return Err(Error::Format(format!(
            "artifact is for the {} backend, expected {}",
            env.backend.name(),
            backend.name()
        )));
    }
    if env.kind != kind {
        return Err(Error::Format(format!("artifact is a {:?}, expected {:?}", env.kind, kind)));
    }
    crate::backend::check_fingerprint(fingerprint, env.fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_roundtrip() {
        let env = Envelope {
            backend: BackendKind::Ckks,
            kind: ArtifactKind::EvalKey,
            fingerprint: 0xdead_beef,
        };
        let mut buf = Vec::new();
        write_envelope(&mut buf, env).unwrap();
        assert_eq!(read_envelope(&mut buf.as_slice()).unwrap(), env);
        let err = expect_envelope(&mut buf.as_slice(), BackendKind::Ckks, ArtifactKind::EvalKey, 1);
        assert!(matches!(err, Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_envelope(&mut &b"NOPE\x01\x00\x01\0\0\0\0\0\0\0\0"[..]).is_err());
    }

    #[test]
    fn vectors_roundtrip() {
        let mut buf = Vec::new();
        write_u64s(&mut buf, &[1, 2, u64::MAX]).unwrap();
        write_f64s(&mut buf, &[0.5, -1.0]).unwrap();
        let mut r = buf.as_slice();
        assert_eq!(read_u64s(&mut r, 10).unwrap(), vec![1, 2, u64::MAX]);
        assert_eq!(read_f64s(&mut r, 10).unwrap(), vec![0.5, -1.0]);
        assert!(read_u64s(&mut &buf[..], 2).is_err());
    }
}
