//! Backend-neutral contract for leveled approximate HE with slot packing.
//!
//! Every higher layer is generic over [`HeBackend`]. Raw backend methods do
//! not count anything; all counted arithmetic goes through [`Evaluator`],
//! which also owns the scale-alignment policy for additions.

use rand::RngCore;
use std::fmt;
use std::io::{Read, Write};
use std::ops::{Add, AddAssign, Sub};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::ckks::chain::ModulusChain;
use crate::error::{Error, Result};
use crate::params::HeParams;
use crate::wire::{self, write_envelope, ArtifactKind, Envelope};

/// Relative tolerance under which two scales are treated as equal.
pub const SCALE_TOLERANCE: f64 = 1e-9;

pub fn scales_match(a: f64, b: f64) -> bool {
    (a - b).abs() <= SCALE_TOLERANCE * a.abs().max(b.abs())
}

/// Slot contents of a plaintext. `Broadcast` stands for the same value in
/// all K slots.
#[derive(Debug, Clone, PartialEq)]
pub enum Slots {
    Broadcast(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainVec {
    pub slots: Slots,
    pub scale: f64,
}

impl PlainVec {
    pub fn new(values: Vec<f64>, scale: f64) -> Self {
        Self {
            slots: Slots::Values(values),
            scale,
        }
    }

    pub fn broadcast(value: f64, scale: f64) -> Self {
        Self {
            slots: Slots::Broadcast(value),
            scale,
        }
    }

    /// Dense slot vector of length `k`, zero padded.
    pub fn to_vec(&self, k: usize) -> Vec<f64> {
        match &self.slots {
            Slots::Broadcast(v) => vec![*v; k],
            Slots::Values(v) => {
                let mut out = v.clone();
                out.resize(k, 0.0);
                out
            }
        }
    }

    pub fn values(&self) -> &[f64] {
        match &self.slots {
            Slots::Values(v) => v,
            Slots::Broadcast(_) => &[],
        }
    }

    pub fn max_abs(&self) -> f64 {
        match &self.slots {
            Slots::Broadcast(v) => v.abs(),
            Slots::Values(v) => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }

    pub(crate) fn check_len(&self, k: usize) -> Result<()> {
        match &self.slots {
            Slots::Values(v) if v.len() > k => Err(Error::SlotCount {
                expected: k,
                found: v.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// Metadata every backend ciphertext exposes. No slot access is offered.
pub trait CipherText: Clone + Send + Sync + fmt::Debug {
    /// Rescale levels remaining.
    fn level(&self) -> usize;
    fn scale(&self) -> f64;
    fn fingerprint(&self) -> u64;
    fn key_id(&self) -> u64;
    /// In-memory payload size in bytes.
    fn byte_size(&self) -> usize;
}

/// Role-tagged key, bound to a parameter fingerprint.
pub trait KeyTag: Send + Sync {
    fn fingerprint(&self) -> u64;
    fn key_id(&self) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Ckks,
    Reference,
}

impl BackendKind {
    pub fn tag(self) -> u8 {
        match self {
            BackendKind::Ckks => 0,
            BackendKind::Reference => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(BackendKind::Ckks),
            1 => Ok(BackendKind::Reference),
            t => Err(Error::Format(format!("unknown backend tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Ckks => "ckks",
            BackendKind::Reference => "ref",
        }
    }
}

pub struct KeySet<B: HeBackend> {
    pub secret: B::SecretKey,
    pub public: B::PublicKey,
    pub eval: B::EvalKey,
}

/// Level and scale after multiplying operands at the given levels/scales:
/// the higher operand is dropped to the lower level, the product is rescaled
/// by that level's prime. Shared by all backends so level traces agree.
pub fn product_level_scale(
    chain: &ModulusChain,
    (level_a, scale_a): (usize, f64),
    (level_b, scale_b): (usize, f64),
) -> Result<(usize, f64)> {
    let level = level_a.min(level_b);
    if level == 0 {
        return Err(Error::DepthExhausted);
    }
    let q = chain.rescale_prime(level) as f64;
    Ok((level - 1, scale_a * scale_b / q))
}

pub fn check_fingerprint(expected: u64, found: u64) -> Result<()> {
    if expected != found {
        return Err(Error::FingerprintMismatch { expected, found });
    }
    Ok(())
}

pub fn check_key(ciphertext: u64, key: u64) -> Result<()> {
    if ciphertext != key {
        return Err(Error::KeyMismatch { ciphertext, key });
    }
    Ok(())
}

pub trait HeBackend: Send + Sync + Sized {
    type Ciphertext: CipherText;
    type SecretKey: KeyTag;
    type PublicKey: KeyTag;
    type EvalKey: KeyTag;

    const KIND: BackendKind;

    fn new(params: HeParams) -> Result<Self>;
    fn params(&self) -> &HeParams;
    fn chain(&self) -> &ModulusChain;

    fn max_level(&self) -> usize {
        self.chain().levels()
    }

    fn slots(&self) -> usize {
        self.params().slots
    }

    /// Deterministic given `params().seed`.
    fn keygen(&self) -> Result<KeySet<Self>>;

    fn encrypt_at<R: RngCore + ?Sized>(
        &self,
        pk: &Self::PublicKey,
        pt: &PlainVec,
        level: usize,
        rng: &mut R,
    ) -> Result<Self::Ciphertext>;

    /// Fresh ciphertext at the maximal level.
    fn encrypt<R: RngCore + ?Sized>(
        &self,
        pk: &Self::PublicKey,
        pt: &PlainVec,
        rng: &mut R,
    ) -> Result<Self::Ciphertext> {
        self.encrypt_at(pk, pt, self.max_level(), rng)
    }

    /// Secret-key encryption, for parties holding the secret key. Fresh
    /// noise is the error term alone.
    fn encrypt_symmetric_at<R: RngCore + ?Sized>(
        &self,
        sk: &Self::SecretKey,
        pt: &PlainVec,
        level: usize,
        rng: &mut R,
    ) -> Result<Self::Ciphertext>;

    /// Always returns K values.
    fn decrypt(&self, sk: &Self::SecretKey, ct: &Self::Ciphertext) -> Result<PlainVec>;

    /// Slot-wise sum. Scales must already match; the higher operand is
    /// dropped to the lower level.
    fn add(&self, a: &Self::Ciphertext, b: &Self::Ciphertext) -> Result<Self::Ciphertext>;

    /// `pt.scale` must match the ciphertext scale.
    fn add_plain(&self, a: &Self::Ciphertext, pt: &PlainVec) -> Result<Self::Ciphertext>;

    /// Slot-wise product, relinearized and rescaled (one level).
    fn mul(
        &self,
        ek: &Self::EvalKey,
        a: &Self::Ciphertext,
        b: &Self::Ciphertext,
    ) -> Result<Self::Ciphertext>;

    /// Slot-wise product with a plaintext, rescaled (one level). The result
    /// scale is `ct.scale * pt.scale / q_level`.
    fn mul_plain(&self, a: &Self::Ciphertext, pt: &PlainVec) -> Result<Self::Ciphertext>;

    /// `Σ xs[i] * ws[i]`, accumulated in ascending index order. Backends may
    /// fuse relinearization and rescaling across the terms.
    fn inner_product(
        &self,
        ek: &Self::EvalKey,
        xs: &[&Self::Ciphertext],
        ws: &[&Self::Ciphertext],
    ) -> Result<Self::Ciphertext> {
        if xs.is_empty() || xs.len() != ws.len() {
            return Err(Error::Dimension(format!(
                "inner product of {} and {} ciphertexts",
                xs.len(),
                ws.len()
            )));
        }
        let mut acc = self.mul(ek, xs[0], ws[0])?;
        for (x, w) in xs.iter().zip(ws).skip(1) {
            acc = self.add(&acc, &self.mul(ek, x, w)?)?;
        }
        Ok(acc)
    }

    // Raw payloads, without the artifact envelope.
    fn write_ciphertext_payload(&self, ct: &Self::Ciphertext, w: &mut dyn Write) -> Result<()>;
    fn read_ciphertext_payload(&self, r: &mut dyn Read) -> Result<Self::Ciphertext>;
    fn write_secret_key_payload(&self, k: &Self::SecretKey, w: &mut dyn Write) -> Result<()>;
    fn read_secret_key_payload(&self, r: &mut dyn Read) -> Result<Self::SecretKey>;
    fn write_public_key_payload(&self, k: &Self::PublicKey, w: &mut dyn Write) -> Result<()>;
    fn read_public_key_payload(&self, r: &mut dyn Read) -> Result<Self::PublicKey>;
    fn write_eval_key_payload(&self, k: &Self::EvalKey, w: &mut dyn Write) -> Result<()>;
    fn read_eval_key_payload(&self, r: &mut dyn Read) -> Result<Self::EvalKey>;

    fn envelope(&self, kind: ArtifactKind) -> Envelope {
        Envelope {
            backend: Self::KIND,
            kind,
            fingerprint: self.params().fingerprint(),
        }
    }

    fn write_ciphertext(&self, ct: &Self::Ciphertext, w: &mut dyn Write) -> Result<()> {
        write_envelope(w, self.envelope(ArtifactKind::Ciphertext))?;
        self.write_ciphertext_payload(ct, w)
    }

    fn read_ciphertext(&self, r: &mut dyn Read) -> Result<Self::Ciphertext> {
        self.expect(r, ArtifactKind::Ciphertext)?;
        self.read_ciphertext_payload(r)
    }

    fn write_ciphertexts(&self, cts: &[Self::Ciphertext], w: &mut dyn Write) -> Result<()> {
        write_envelope(w, self.envelope(ArtifactKind::CiphertextBatch))?;
        wire::write_u64(w, cts.len() as u64)?;
        cts.iter().try_for_each(|ct| self.write_ciphertext_payload(ct, w))
    }

    fn read_ciphertexts(&self, r: &mut dyn Read) -> Result<Vec<Self::Ciphertext>> {
        self.expect(r, ArtifactKind::CiphertextBatch)?;
        let n = wire::read_u64(r)?;
        (0..n).map(|_| self.read_ciphertext_payload(r)).collect()
    }

    fn write_secret_key(&self, k: &Self::SecretKey, w: &mut dyn Write) -> Result<()> {
        write_envelope(w, self.envelope(ArtifactKind::SecretKey))?;
        self.write_secret_key_payload(k, w)
    }

    fn read_secret_key(&self, r: &mut dyn Read) -> Result<Self::SecretKey> {
        self.expect(r, ArtifactKind::SecretKey)?;
        self.read_secret_key_payload(r)
    }

    fn write_public_key(&self, k: &Self::PublicKey, w: &mut dyn Write) -> Result<()> {
        write_envelope(w, self.envelope(ArtifactKind::PublicKey))?;
        self.write_public_key_payload(k, w)
    }

    fn read_public_key(&self, r: &mut dyn Read) -> Result<Self::PublicKey> {
        self.expect(r, ArtifactKind::PublicKey)?;
        self.read_public_key_payload(r)
    }

    fn write_eval_key(&self, k: &Self::EvalKey, w: &mut dyn Write) -> Result<()> {
        write_envelope(w, self.envelope(ArtifactKind::EvalKey))?;
        self.write_eval_key_payload(k, w)
    }

    fn read_eval_key(&self, r: &mut dyn Read) -> Result<Self::EvalKey> {
        self.expect(r, ArtifactKind::EvalKey)?;
        self.read_eval_key_payload(r)
    }

    #[doc(hidden)]
    fn expect(&self, r: &mut dyn Read, kind: ArtifactKind) -> Result<()> {
        wire::expect_envelope(r, Self::KIND, kind, self.params().fingerprint())
    }
}

/// Plain snapshot of operation tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, serde::Serialize)]
pub struct OpCounts {
    pub ctct_mult: u64,
    pub ctpt_mult: u64,
    pub ctct_add: u64,
    pub ctpt_add: u64,
}

impl OpCounts {
    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }
}

impl Add for OpCounts {
    type Output = OpCounts;
    fn add(self, o: OpCounts) -> OpCounts {
        OpCounts {
            ctct_mult: self.ctct_mult + o.ctct_mult,
            ctpt_mult: self.ctpt_mult + o.ctpt_mult,
            ctct_add: self.ctct_add + o.ctct_add,
            ctpt_add: self.ctpt_add + o.ctpt_add,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        *self = *self + o;
    }
}

impl Sub for OpCounts {
    type Output = OpCounts;
    fn sub(self, o: OpCounts) -> OpCounts {
        OpCounts {
            ctct_mult: self.ctct_mult - o.ctct_mult,
            ctpt_mult: self.ctpt_mult - o.ctpt_mult,
            ctct_add: self.ctct_add - o.ctct_add,
            ctpt_add: self.ctpt_add - o.ctpt_add,
        }
    }
}

impl fmt::Display for OpCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CT-CT mult {}, CT-PT mult {}, CT-CT add {}, CT-PT add {}",
            self.ctct_mult, self.ctpt_mult, self.ctct_add, self.ctpt_add
        )
    }
}

/// Thread-safe tallies. Resetting needs exclusive access, so it cannot
/// happen while a run holds a shared reference.
#[derive(Debug, Default)]
pub struct OpCounters {
    ctct_mult: AtomicU64,
    ctpt_mult: AtomicU64,
    ctct_add: AtomicU64,
    ctpt_add: AtomicU64,
}

impl OpCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> OpCounts {
        OpCounts {
            ctct_mult: self.ctct_mult.load(Ordering::Relaxed),
            ctpt_mult: self.ctpt_mult.load(Ordering::Relaxed),
            ctct_add: self.ctct_add.load(Ordering::Relaxed),
            ctpt_add: self.ctpt_add.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    fn bump(c: &AtomicU64, n: u64) {
        c.fetch_add(n, Ordering::Relaxed);
    }
}

/// Counted arithmetic over a backend with a fixed evaluation key.
pub struct Evaluator<'a, B: HeBackend> {
    backend: &'a B,
    eval_key: &'a B::EvalKey,
    counters: &'a OpCounters,
}

impl<'a, B: HeBackend> Clone for Evaluator<'a, B> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<'a, B: HeBackend> Copy for Evaluator<'a, B> {}

impl<'a, B: HeBackend> Evaluator<'a, B> {
    pub fn new(backend: &'a B, eval_key: &'a B::EvalKey, counters: &'a OpCounters) -> Self {
        Self {
            backend,
            eval_key,
            counters,
        }
    }

    /// Same backend and key, different tally.
    pub fn with_counters(&self, counters: &'a OpCounters) -> Self {
        Self { counters, ..*self }
    }

    pub fn backend(&self) -> &'a B {
        self.backend
    }

    pub fn eval_key(&self) -> &'a B::EvalKey {
        self.eval_key
    }

    pub fn counters(&self) -> &'a OpCounters {
        self.counters
    }

    /// Prime divided out by a multiplication at `level`.
    pub fn rescale_prime(&self, level: usize) -> f64 {
        self.backend.chain().rescale_prime(level) as f64
    }

    /// CT-CT add. Mismatched scales are aligned first by multiplying the
    /// smaller-scale operand by a plaintext 1 (one CT-PT mult, one level).
    pub fn add(&self, a: &B::Ciphertext, b: &B::Ciphertext) -> Result<B::Ciphertext> {
        let out = if scales_match(a.scale(), b.scale()) {
            self.backend.add(a, b)?
        } else if a.scale() < b.scale() {
            let a = self.mul_const_to_scale(a, 1.0, b.scale())?;
            self.backend.add(&a, b)?
        } else {
            let b = self.mul_const_to_scale(b, 1.0, a.scale())?;
            self.backend.add(a, &b)?
        };
        OpCounters::bump(&self.counters.ctct_add, 1);
        Ok(out)
    }

    pub fn add_plain(&self, a: &B::Ciphertext, pt: &PlainVec) -> Result<B::Ciphertext> {
        let out = self.backend.add_plain(a, pt)?;
        OpCounters::bump(&self.counters.ctpt_add, 1);
        Ok(out)
    }

    /// Adds `c` to every slot, encoded at the ciphertext's scale.
    pub fn add_const(&self, a: &B::Ciphertext, c: f64) -> Result<B::Ciphertext> {
        self.add_plain(a, &PlainVec::broadcast(c, a.scale()))
    }

    pub fn mul(&self, a: &B::Ciphertext, b: &B::Ciphertext) -> Result<B::Ciphertext> {
        let out = self.backend.mul(self.eval_key, a, b)?;
        OpCounters::bump(&self.counters.ctct_mult, 1);
        Ok(out)
    }

    pub fn mul_plain(&self, a: &B::Ciphertext, pt: &PlainVec) -> Result<B::Ciphertext> {
        let out = self.backend.mul_plain(a, pt)?;
        OpCounters::bump(&self.counters.ctpt_mult, 1);
        Ok(out)
    }

    /// Multiplies every slot by `c` with the output landing on `target` scale.
    pub fn mul_const_to_scale(&self, a: &B::Ciphertext, c: f64, target: f64) -> Result<B::Ciphertext> {
        if a.level() == 0 {
            return Err(Error::DepthExhausted);
        }
        let pt_scale = target * self.rescale_prime(a.level()) / a.scale();
        self.mul_plain(a, &PlainVec::broadcast(c, pt_scale))
    }

    /// Multiplies every slot by `c`, preserving the ciphertext's scale.
    pub fn mul_const(&self, a: &B::Ciphertext, c: f64) -> Result<B::Ciphertext> {
        self.mul_const_to_scale(a, c, a.scale())
    }

    /// `Σ xs[i] * ws[i]`: counts `n` CT-CT mults and `n - 1` CT-CT adds.
    pub fn inner_product(&self, xs: &[&B::Ciphertext], ws: &[&B::Ciphertext]) -> Result<B::Ciphertext> {
        let out = self.backend.inner_product(self.eval_key, xs, ws)?;
        let n = xs.len() as u64;
        OpCounters::bump(&self.counters.ctct_mult, n);
        OpCounters::bump(&self.counters.ctct_add, n - 1);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_arithmetic() {
        let a = OpCounts {
            ctct_mult: 3,
            ctpt_mult: 2,
            ctct_add: 1,
            ctpt_add: 0,
        };
        let b = a + a;
        assert_eq!(b - a, a);
        assert!(OpCounts::default().is_zero());
    }

    #[test]
    fn counters_reset() {
        let mut c = OpCounters::new();
        OpCounters::bump(&c.ctct_add, 4);
        assert_eq!(c.snapshot().ctct_add, 4);
        c.reset();
        assert!(c.snapshot().is_zero());
    }

    #[test]
    fn plainvec_padding() {
        let p = PlainVec::new(vec![1.0, 2.0], 1.0);
        assert_eq!(p.to_vec(4), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(PlainVec::broadcast(0.5, 1.0).to_vec(3), vec![0.5; 3]);
        assert!(p.check_len(1).is_err());
    }

    #[test]
    fn scale_match_tolerance() {
        assert!(scales_match(2f64.powi(35), 2f64.powi(35) * (1.0 + 1e-12)));
        assert!(!scales_match(2f64.powi(35), 2f64.powi(35) * (1.0 + 1e-6)));
    }
}
