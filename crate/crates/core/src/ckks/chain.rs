//! Modulus chain layout: one wide base prime, `levels` primes of about r
//! bits (one consumed per rescale) and one special prime for key switching.

use serde::{Deserialize, Serialize};

use super::arith::is_prime;
use crate::error::{Error, Result};
use crate::params::HeParams;

/// Headroom of the base prime above the scale.
pub const BASE_EXTRA_BITS: u32 = 25;
pub const MAX_PRIME_BITS: u32 = 61;
const MAX_BASE_BITS: u32 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModulusChain {
    /// `primes[0]` is the base prime, `primes[i]` for `i >= 1` is dropped when
    /// rescaling a ciphertext at level `i`.
    primes: Vec<u64>,
    special: u64,
}

/// Number of rescale levels the chain affords for `(L, r)`.
pub fn chain_levels(modulus_bits: u32, precision_bits: u32) -> Option<usize> {
    let base = base_bits(precision_bits);
    (modulus_bits >= base).then(|| ((modulus_bits - base) / precision_bits) as usize)
}

pub fn base_bits(precision_bits: u32) -> u32 {
    (precision_bits + BASE_EXTRA_BITS).min(MAX_BASE_BITS)
}

/// Largest primes `≡ 1 (mod m)` strictly below `2^bits`, skipping `exclude`.
fn primes_below(bits: u32, m: u64, count: usize, exclude: &[u64]) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let floor = 1u64 << (bits - 1);
    let top = 1u64 << bits;
    let mut c = ((top - 1) / m) * m + 1;
    if c >= top {
        c -= m;
    }
    while out.len() < count && c > floor {
        if is_prime(c) && !exclude.contains(&c) {
            out.push(c);
        }
        if c <= m {
            break;
        }
        c -= m;
    }
    out
}

pub fn build_chain(params: &HeParams) -> Result<ModulusChain> {
    let r = params.precision_bits;
    let levels = chain_levels(params.modulus_bits, r).ok_or_else(|| {
        Error::Chain(format!(
            "modulus budget L = {} is smaller than the {}-bit base prime",
            params.modulus_bits,
            base_bits(r)
        ))
    })?;
    let m = params.m as u64;
    let base = primes_below(base_bits(r), m, 1, &[]);
    let special = primes_below(MAX_PRIME_BITS, m, 1, &base);
    if base.is_empty() || special.is_empty() {
        return Err(Error::Chain(format!("no NTT-friendly base prime for m = {m}")));
    }
    let mut exclude = vec![base[0], special[0]];
    let level_primes = primes_below(r, m, levels, &exclude);
    if level_primes.len() < levels {
        return Err(Error::Chain(format!(
            "found only {} of {levels} NTT-friendly {r}-bit primes for m = {m}",
            level_primes.len()
        )));
    }
    exclude.extend(&level_primes);
    let mut primes = base;
    primes.extend(level_primes);
    Ok(ModulusChain {
        primes,
        special: special[0],
    })
}

impl ModulusChain {
    /// Number of usable rescale levels (the count of r-bit primes).
    pub fn levels(&self) -> usize {
        self.primes.len() - 1
    }

    pub fn primes(&self) -> &[u64] {
        &self.primes
    }

    pub fn base(&self) -> u64 {
        self.primes[0]
    }

    pub fn special(&self) -> u64 {
        self.special
    }

    /// Prime divided out when rescaling at `level`.
    pub fn rescale_prime(&self, level: usize) -> u64 {
        self.primes[level]
    }

    /// Primes active at `level`.
    pub fn active(&self, level: usize) -> &[u64] {
        &self.primes[..=level]
    }

    pub fn total_bits(&self) -> f64 {
        self.primes.iter().map(|&p| (p as f64).log2()).sum()
    }
}
