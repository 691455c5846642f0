//! Exact simulator of the backend contract: slot values in the clear plus the
//! same level and scale bookkeeping as the real scheme. Insecure by design,
//! it exists to be the oracle for everything built on top.

use rand::RngCore;
use std::io::{Read, Write};

use crate::backend::{
    check_fingerprint, check_key, product_level_scale, scales_match, BackendKind, CipherText,
    HeBackend, KeySet, KeyTag, PlainVec, Slots,
};
use crate::ckks::chain::{build_chain, ModulusChain};
use crate::error::{Error, Result};
use crate::params::HeParams;
use crate::{rng, wire};

const MAX_ENCODE_MAGNITUDE: f64 = 4.6e18;

#[derive(Debug, Clone, PartialEq)]
pub struct SimCipher {
    values: Vec<f64>,
    level: usize,
    scale: f64,
    fingerprint: u64,
    key_id: u64,
}

impl SimCipher {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl CipherText for SimCipher {
    fn level(&self) -> usize {
        self.level
    }
    fn scale(&self) -> f64 {
        self.scale
    }
    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
    fn key_id(&self) -> u64 {
        self.key_id
    }
    fn byte_size(&self) -> usize {
        self.values.len() * 8
    }
}

/// Key material is only a role tag bound to parameters and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimKey<const ROLE: u8> {
    fingerprint: u64,
    key_id: u64,
}

impl<const ROLE: u8> KeyTag for SimKey<ROLE> {
    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
    fn key_id(&self) -> u64 {
        self.key_id
    }
}

pub type SimSecretKey = SimKey<0>;
pub type SimPublicKey = SimKey<1>;
pub type SimEvalKey = SimKey<2>;

pub struct RefBackend {
    params: HeParams,
    chain: ModulusChain,
    fingerprint: u64,
    level_bits: Vec<f64>,
}

impl RefBackend {
    /// Largest integer magnitude the real scheme could hold at `level`.
    fn capacity(&self, level: usize) -> f64 {
        MAX_ENCODE_MAGNITUDE.min(2f64.powf(self.level_bits[level] - 1.0))
    }

    fn fresh(&self, pt: &PlainVec, level: usize, key_id: u64) -> Result<SimCipher> {
        if level > self.max_level() {
            return Err(Error::InvalidParams(format!(
                "level {level} exceeds chain capacity {}",
                self.max_level()
            )));
        }
        if !(pt.scale.is_finite() && pt.scale > 0.0) {
            return Err(Error::InvalidParams(format!("invalid scale {}", pt.scale)));
        }
        pt.check_len(self.slots())?;
        let values = pt.to_vec(self.slots());
        self.check_overflow(&values, pt.scale, level)?;
        Ok(SimCipher {
            values,
            level,
            scale: pt.scale,
            fingerprint: self.fingerprint,
            key_id,
        })
    }

    fn check_overflow(&self, values: &[f64], scale: f64, level: usize) -> Result<()> {
        let bound = self.capacity(level);
        for &v in values {
            let x = (v * scale).abs();
            if !x.is_finite() || x >= bound {
                return Err(Error::EncodeOverflow(x));
            }
        }
        Ok(())
    }

    fn check_pair(&self, a: &SimCipher, b: &SimCipher) -> Result<()> {
        check_fingerprint(self.fingerprint, a.fingerprint)?;
        check_fingerprint(self.fingerprint, b.fingerprint)?;
        check_key(a.key_id, b.key_id)
    }

    fn sim_key<const R: u8>(&self) -> SimKey<R> {
        SimKey {
            fingerprint: self.fingerprint,
            key_id: rng::key_id(self.fingerprint, self.params.seed),
        }
    }

    fn read_key<const R: u8>(&self, r: &mut dyn Read) -> Result<SimKey<R>> {
        let role = wire::read_u8(r)?;
        if role != R {
            return Err(Error::Format(format!("key role {role}, expected {R}")));
        }
        Ok(SimKey {
            fingerprint: self.fingerprint,
            key_id: wire::read_u64(r)?,
        })
    }

    fn write_key<const R: u8>(&self, k: &SimKey<R>, w: &mut dyn Write) -> Result<()> {
        wire::write_u8(w, R)?;
        wire::write_u64(w, k.key_id)
    }
}

impl HeBackend for RefBackend {
    type Ciphertext = SimCipher;
    type SecretKey = SimSecretKey;
    type PublicKey = SimPublicKey;
    type EvalKey = SimEvalKey;

    const KIND: BackendKind = BackendKind::Reference;

    fn new(params: HeParams) -> Result<Self> {
        let chain = build_chain(&params)?;
        let mut level_bits = Vec::new();
        let mut acc = 0.0;
        for &q in chain.primes() {
            acc += (q as f64).log2();
            level_bits.push(acc);
        }
        Ok(Self {
            fingerprint: params.fingerprint(),
            params,
            chain,
            level_bits,
        })
    }

    fn params(&self) -> &HeParams {
        &self.params
    }

    fn chain(&self) -> &ModulusChain {
        &self.chain
    }

    fn keygen(&self) -> Result<KeySet<Self>> {
        Ok(KeySet {
            secret: self.sim_key(),
            public: self.sim_key(),
            eval: self.sim_key(),
        })
    }

    fn encrypt_at<R: RngCore + ?Sized>(
        &self,
        pk: &SimPublicKey,
        pt: &PlainVec,
        level: usize,
        _rng: &mut R,
    ) -> Result<SimCipher> {
        check_fingerprint(self.fingerprint, pk.fingerprint)?;
        self.fresh(pt, level, pk.key_id)
    }

    fn encrypt_symmetric_at<R: RngCore + ?Sized>(
        &self,
        sk: &SimSecretKey,
        pt: &PlainVec,
        level: usize,
        _rng: &mut R,
    ) -> Result<SimCipher> {
        check_fingerprint(self.fingerprint, sk.fingerprint)?;
        self.fresh(pt, level, sk.key_id)
    }

    /// Values the real scheme would have wrapped around are reported as errors.
    fn decrypt(&self, sk: &SimSecretKey, ct: &SimCipher) -> Result<PlainVec> {
        check_fingerprint(self.fingerprint, ct.fingerprint)?;
        check_fingerprint(self.fingerprint, sk.fingerprint)?;
        check_key(ct.key_id, sk.key_id)?;
        self.check_overflow(&ct.values, ct.scale, ct.level)?;
        Ok(PlainVec::new(ct.values.clone(), ct.scale))
    }

    fn add(&self, a: &SimCipher, b: &SimCipher) -> Result<SimCipher> {
        self.check_pair(a, b)?;
        if !scales_match(a.scale, b.scale) {
            return Err(Error::ScaleMismatch(a.scale, b.scale));
        }
        Ok(SimCipher {
            values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
            level: a.level.min(b.level),
            scale: a.scale,
            fingerprint: a.fingerprint,
            key_id: a.key_id,
        })
    }

    fn add_plain(&self, a: &SimCipher, pt: &PlainVec) -> Result<SimCipher> {
        check_fingerprint(self.fingerprint, a.fingerprint)?;
        if !scales_match(a.scale, pt.scale) {
            return Err(Error::ScaleMismatch(a.scale, pt.scale));
        }
        pt.check_len(self.slots())?;
        let values = match &pt.slots {
            Slots::Broadcast(c) => a.values.iter().map(|x| x + c).collect(),
            Slots::Values(_) => {
                let p = pt.to_vec(self.slots());
                a.values.iter().zip(&p).map(|(x, y)| x + y).collect()
            }
        };
        Ok(SimCipher { values, ..a.clone() })
    }

    fn mul(&self, ek: &SimEvalKey, a: &SimCipher, b: &SimCipher) -> Result<SimCipher> {
        self.check_pair(a, b)?;
        check_fingerprint(self.fingerprint, ek.fingerprint)?;
        check_key(a.key_id, ek.key_id)?;
        let (level, scale) = product_level_scale(&self.chain, (a.level, a.scale), (b.level, b.scale))?;
        Ok(SimCipher {
            values: a.values.iter().zip(&b.values).map(|(x, y)| x * y).collect(),
            level,
            scale,
            fingerprint: a.fingerprint,
            key_id: a.key_id,
        })
    }

    fn mul_plain(&self, a: &SimCipher, pt: &PlainVec) -> Result<SimCipher> {
        check_fingerprint(self.fingerprint, a.fingerprint)?;
        pt.check_len(self.slots())?;
        let (level, scale) = product_level_scale(&self.chain, (a.level, a.scale), (a.level, pt.scale))?;
        let values = match &pt.slots {
            Slots::Broadcast(c) => a.values.iter().map(|x| x * c).collect(),
            Slots::Values(_) => {
                let p = pt.to_vec(self.slots());
                a.values.iter().zip(&p).map(|(x, y)| x * y).collect()
            }
        };
        Ok(SimCipher {
            values,
            level,
            scale,
            ..a.clone()
        })
    }

    fn write_ciphertext_payload(&self, ct: &SimCipher, w: &mut dyn Write) -> Result<()> {
        wire::write_u32(w, ct.level as u32)?;
        wire::write_f64(w, ct.scale)?;
        wire::write_u64(w, ct.key_id)?;
        wire::write_f64s(w, &ct.values)
    }

    fn read_ciphertext_payload(&self, r: &mut dyn Read) -> Result<SimCipher> {
        let level = wire::read_u32(r)? as usize;
        if level > self.max_level() {
            return Err(Error::Format(format!("ciphertext level {level} beyond the chain")));
        }
        let scale = wire::read_f64(r)?;
        let key_id = wire::read_u64(r)?;
        let values = wire::read_f64s(r, self.slots())?;
        if values.len() != self.slots() {
            return Err(Error::SlotCount {
                expected: self.slots(),
                found: values.len(),
            });
        }
        Ok(SimCipher {
            values,
            level,
            scale,
            fingerprint: self.fingerprint,
            key_id,
        })
    }

    fn write_secret_key_payload(&self, k: &SimSecretKey, w: &mut dyn Write) -> Result<()> {
        self.write_key(k, w)
    }
    fn read_secret_key_payload(&self, r: &mut dyn Read) -> Result<SimSecretKey> {
        self.read_key(r)
    }
    fn write_public_key_payload(&self, k: &SimPublicKey, w: &mut dyn Write) -> Result<()> {
        self.write_key(k, w)
    }
    fn read_public_key_payload(&self, r: &mut dyn Read) -> Result<SimPublicKey> {
        self.read_key(r)
    }
    fn write_eval_key_payload(&self, k: &SimEvalKey, w: &mut dyn Write) -> Result<()> {
        self.write_key(k, w)
    }
    fn read_eval_key_payload(&self, r: &mut dyn Read) -> Result<SimEvalKey> {
        self.read_key(r)
    }
}
