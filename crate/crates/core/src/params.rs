//! Scheme parameters (cyclotomic index, modulus budget, precision) and the
//! coarse security lookup used to gate them.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;

use crate::error::{Error, Result};

/// Smallest modulus budget (bits) that admits a first multiplication under the
/// empirical calibration of one base allotment plus 100 bits per level.
pub const MIN_MULT_MODULUS_BITS: u32 = 200;
/// Bits added per extra multiplicative level under the same calibration.
pub const BITS_PER_LEVEL_HEURISTIC: u32 = 100;

pub const MIN_PRECISION_BITS: u32 = 20;
pub const MAX_PRECISION_BITS: u32 = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeParams {
    /// Cyclotomic index, a power of two.
    pub m: usize,
    /// φ(m) = m/2.
    pub ring_degree: usize,
    /// K = φ(m)/2 packed slots.
    pub slots: usize,
    /// L, bit size of a fresh ciphertext modulus.
    pub modulus_bits: u32,
    /// r, fixed-point precision of encodings.
    pub precision_bits: u32,
    pub security_target: Option<u32>,
    /// Seed for all key and encryption randomness. Never serialized into
    /// public artifacts.
    #[serde(skip, default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamWarning {
    /// L is below the 200-bit calibration point: no multiplication possible.
    NoMultiplication,
}

impl fmt::Display for ParamWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamWarning::NoMultiplication => write!(
                f,
                "modulus budget below {MIN_MULT_MODULUS_BITS} bits: no multiplication possible"
            ),
        }
    }
}

/// Validates `(m, L, r)` and derives ring degree and slot count.
pub fn derive_params(m: usize, modulus_bits: u32, precision_bits: u32, seed: u64) -> Result<HeParams> {
    if m < 16 || !m.is_power_of_two() {
        return Err(Error::InvalidParams(format!(
            "cyclotomic index m = {m} must be a power of two and at least 16"
        )));
    }
    if modulus_bits == 0 || precision_bits == 0 {
        return Err(Error::InvalidParams("L and r must be positive".into()));
    }
    if !(MIN_PRECISION_BITS..=MAX_PRECISION_BITS).contains(&precision_bits) {
        return Err(Error::InvalidParams(format!(
            "precision r = {precision_bits} outside [{MIN_PRECISION_BITS}, {MAX_PRECISION_BITS}]"
        )));
    }
    let ring_degree = m / 2;
    let params = HeParams {
        m,
        ring_degree,
        slots: ring_degree / 2,
        modulus_bits,
        precision_bits,
        security_target: None,
        seed,
    };
    for w in params.warnings() {
        log::warn!("{w}");
    }
    Ok(params)
}

impl HeParams {
    pub fn with_security_target(mut self, bits: u32) -> Self {
        self.security_target = Some(bits);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn warnings(&self) -> Vec<ParamWarning> {
        let mut out = Vec::new();
        if self.modulus_bits < MIN_MULT_MODULUS_BITS {
            out.push(ParamWarning::NoMultiplication);
        }
        out
    }

    /// Binds keys and ciphertexts to `(m, L, r)`. The seed is excluded.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"hecnn-params-v1");
        h.update((self.m as u64).to_le_bytes());
        h.update(self.modulus_bits.to_le_bytes());
        h.update(self.precision_bits.to_le_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Fixed encoding scale 2^r.
    pub fn default_scale(&self) -> f64 {
        2f64.powi(self.precision_bits as i32)
    }

    pub fn security(&self) -> SecurityLevel {
        security_estimate(self)
    }

    /// Parses `"m,L,r"`.
    pub fn parse_triple(s: &str, seed: u64) -> Result<HeParams> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidParams(format!("expected m,L,r but got {s:?}")));
        }
        let num = |p: &str| -> Result<u64> {
            if let Some(exp) = p.strip_prefix("2^") {
                let e: u32 = exp.parse().map_err(|_| Error::InvalidParams(format!("bad exponent {p:?}")))?;
                return Ok(1u64 << e);
            }
            p.parse().map_err(|_| Error::InvalidParams(format!("bad number {p:?}")))
        };
        derive_params(num(parts[0])? as usize, num(parts[1])? as u32, num(parts[2])? as u32, seed)
    }
}

/// Security estimate in bits, or `Unknown` for ring degrees outside the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SecurityLevel {
    Bits(f64),
    Unknown,
}

impl SecurityLevel {
    pub fn at_least(&self, bits: f64) -> bool {
        matches!(self, SecurityLevel::Bits(b) if *b >= bits)
    }

    pub fn bits(&self) -> Option<f64> {
        match self {
            SecurityLevel::Bits(b) => Some(*b),
            SecurityLevel::Unknown => None,
        }
    }
}

impl fmt::Display for SecurityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SecurityLevel::Bits(b) if *b >= 256.0 => write!(f, ">=256 bits"),
            SecurityLevel::Bits(b) => write!(f, "{b:.1} bits"),
            SecurityLevel::Unknown => write!(f, "unknown"),
        }
    }
}

/// Maximum total modulus bits per ring degree for 128/192/256-bit classical
/// security with a ternary secret (HomomorphicEncryption.org standard table).
pub const SECURITY_TABLE: [(usize, [u32; 3]); 6] = [
    (1024, [27, 19, 14]),
    (2048, [54, 37, 29]),
    (4096, [109, 75, 58]),
    (8192, [218, 152, 118]),
    (16384, [438, 305, 237]),
    (32768, [881, 611, 476]),
];

/// Largest modulus budget admitted at 128-bit security for a ring degree.
pub fn max_modulus_bits_128(ring_degree: usize) -> Option<u32> {
    SECURITY_TABLE
        .iter()
        .find(|(n, _)| *n == ring_degree)
        .map(|(_, caps)| caps[0])
}

/// Table lookup, not a lattice estimator. Returns at least 128 iff L is within
/// the 128-bit cap for φ(m); between caps the estimate is linearly
/// interpolated, and beyond the 128-bit cap it decays as `128 * cap / L`.
pub fn security_estimate(params: &HeParams) -> SecurityLevel {
    estimate_bits(params.ring_degree, params.modulus_bits)
}

pub fn estimate_bits(ring_degree: usize, modulus_bits: u32) -> SecurityLevel {
    let Some((_, caps)) = SECURITY_TABLE.iter().find(|(n, _)| *n == ring_degree) else {
        return SecurityLevel::Unknown;
    };
    let l = modulus_bits as f64;
    let [c128, c192, c256] = caps.map(|c| c as f64);
    let bits = if l <= c256 {
        256.0
    } else if l <= c192 {
        256.0 - 64.0 * (l - c256) / (c192 - c256)
    } else if l <= c128 {
        192.0 - 64.0 * (l - c192) / (c128 - c192)
    } else {
        128.0 * c128 / l
    };
    SecurityLevel::Bits(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_counts() {
        assert_eq!(derive_params(1 << 16, 600, 35, 0).unwrap().slots, 16384);
        assert_eq!(derive_params(1 << 16, 600, 35, 0).unwrap().ring_degree, 32768);
        assert_eq!(derive_params(16, 200, 20, 0).unwrap().slots, 4);
        assert_eq!(derive_params(1 << 14, 500, 30, 0).unwrap().slots, 4096);
    }

    #[test]
    fn rejects_bad_index() {
        assert!(derive_params(24, 200, 30, 0).is_err());
        assert!(derive_params(8, 200, 30, 0).is_err());
        assert!(derive_params(64, 200, 10, 0).is_err());
        assert!(derive_params(64, 200, 51, 0).is_err());
    }

    #[test]
    fn low_budget_is_a_warning() {
        let p = derive_params(1 << 10, 150, 30, 0).unwrap();
        assert_eq!(p.warnings(), vec![ParamWarning::NoMultiplication]);
        assert!(derive_params(1 << 10, 200, 30, 0).unwrap().warnings().is_empty());
    }

    #[test]
    fn fingerprint_ignores_seed() {
        let a = derive_params(1 << 12, 300, 35, 1).unwrap();
        let b = derive_params(1 << 12, 300, 35, 2).unwrap();
        let c = derive_params(1 << 12, 301, 35, 1).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn security_anchor_points() {
        assert!(estimate_bits(32768, 600).at_least(128.0));
        assert!(!estimate_bits(32768, 900).at_least(128.0));
        assert!(!estimate_bits(16384, 600).at_least(128.0));
        assert_eq!(estimate_bits(8, 200), SecurityLevel::Unknown);
        assert!(!SecurityLevel::Unknown.at_least(0.0));
    }

    #[test]
    fn security_is_monotone() {
        for &(n, _) in &SECURITY_TABLE {
            let mut prev = f64::INFINITY;
            for l in (10..1200).step_by(7) {
                let b = estimate_bits(n, l).bits().unwrap();
                assert!(b <= prev, "n={n} L={l}");
                prev = b;
            }
        }
        for l in (10..1200).step_by(11) {
            let mut prev = 0.0;
            for &(n, _) in &SECURITY_TABLE {
                let b = estimate_bits(n, l).bits().unwrap();
                assert!(b >= prev, "n={n} L={l}");
                prev = b;
            }
        }
    }

    #[test]
    fn parse_triple_accepts_powers() {
        let p = HeParams::parse_triple("2^14,300,35", 7).unwrap();
        assert_eq!((p.m, p.modulus_bits, p.precision_bits, p.seed), (16384, 300, 35, 7));
        assert!(HeParams::parse_triple("16384,300", 0).is_err());
    }
}
