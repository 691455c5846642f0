//! Canonical-embedding encoder: K = N/2 real slots <-> integer polynomial
//! coefficients, via the special FFT over the rotation group generated by 5.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Encoder {
    ring_degree: usize,
    slots: usize,
    rot_group: Vec<usize>,
    ksi: Vec<Complex64>,
}

fn bit_reverse_permute(v: &mut [Complex64]) {
    let n = v.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j ^= bit;
        if i < j {
            v.swap(i, j);
        }
    }
}

impl Encoder {
    pub fn new(ring_degree: usize) -> Self {
        let m = 2 * ring_degree;
        let slots = ring_degree / 2;
        let mut rot_group = Vec::with_capacity(slots);
        let mut g = 1usize;
        for _ in 0..slots {
            rot_group.push(g);
            g = (g * 5) % m;
        }
        let ksi = (0..=m)
            .map(|j| Complex64::from_polar(1.0, 2.0 * PI * j as f64 / m as f64))
            .collect();
        Self {
            ring_degree,
            slots,
            rot_group,
            ksi,
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    /// Evaluation points `ζ^{5^j}` of slot `j`, for tests and diagnostics.
    pub fn slot_root(&self, j: usize) -> Complex64 {
        self.ksi[self.rot_group[j]]
    }

    fn embed(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.ring_degree;
        bit_reverse_permute(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * gap;
                    let u = vals[i + j];
                    let v = vals[i + j + lenh] * self.ksi[idx];
                    vals[i + j] = u + v;
                    vals[i + j + lenh] = u - v;
                }
            }
            len <<= 1;
        }
    }

    fn embed_inv(&self, vals: &mut [Complex64]) {
        let size = vals.len();
        let m = 2 * self.ring_degree;
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            let gap = m / lenq;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - (self.rot_group[j] % lenq)) * gap;
                    let u = vals[i + j] + vals[i + j + lenh];
                    let v = (vals[i + j] - vals[i + j + lenh]) * self.ksi[idx];
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            *v *= inv;
        }
    }

    /// Encodes up to K real values (zero padded) at `scale`. Any coefficient
    /// whose magnitude reaches `bound` is rejected.
    pub fn encode(&self, values: &[f64], scale: f64, bound: f64) -> Result<Vec<i64>> {
        if values.len() > self.slots {
            return Err(Error::SlotCount {
                expected: self.slots,
                found: values.len(),
            });
        }
        let mut vals = vec![Complex64::new(0.0, 0.0); self.slots];
        for (v, &x) in vals.iter_mut().zip(values) {
            *v = Complex64::new(x, 0.0);
        }
        self.embed_inv(&mut vals);
        let mut coeffs = vec![0i64; self.ring_degree];
        let half = self.slots;
        for (i, v) in vals.iter().enumerate() {
            coeffs[i] = Self::scale_round(v.re * scale, bound)?;
            coeffs[i + half] = Self::scale_round(v.im * scale, bound)?;
        }
        Ok(coeffs)
    }

    /// Encoding of the constant vector `c` is the constant polynomial.
    pub fn encode_constant(&self, c: f64, scale: f64, bound: f64) -> Result<i64> {
        Self::scale_round(c * scale, bound)
    }

    fn scale_round(x: f64, bound: f64) -> Result<i64> {
        if !x.is_finite() || x.abs() >= bound {
            return Err(Error::EncodeOverflow(x.abs()));
        }
        Ok(x.round() as i64)
    }

    /// Decodes centered integer coefficients (as reals) back to K slot values.
    pub fn decode(&self, coeffs: &[f64], scale: f64) -> Vec<f64> {
        let half = self.slots;
        let mut vals: Vec<Complex64> = (0..half)
            .map(|i| Complex64::new(coeffs[i] / scale, coeffs[i + half] / scale))
            .collect();
        self.embed(&mut vals);
        vals.into_iter().map(|c| c.re).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    /// Direct evaluation of the coefficient polynomial at each slot root.
    #[test]
    fn slots_are_polynomial_evaluations() {
        let n = 32;
        let enc = Encoder::new(n);
        let mut s = 7;
        let values: Vec<f64> = (0..enc.slots()).map(|_| lcg(&mut s)).collect();
        let scale = 2f64.powi(30);
        let coeffs = enc.encode(&values, scale, 1e18).unwrap();
        for (j, &want) in values.iter().enumerate() {
            let root = enc.slot_root(j);
            let mut acc = Complex64::new(0.0, 0.0);
            let mut pw = Complex64::new(1.0, 0.0);
            for &c in &coeffs {
                acc += pw * c as f64;
                pw *= root;
            }
            assert!((acc.re / scale - want).abs() < 1e-7, "slot {j}");
            assert!((acc.im / scale).abs() < 1e-7, "slot {j}");
        }
    }

    #[test]
    fn zero_roundtrip_is_exact() {
        let enc = Encoder::new(64);
        let c = enc.encode(&[0.0; 32], 2f64.powi(35), 1e18).unwrap();
        assert!(c.iter().all(|&x| x == 0));
        let d = enc.decode(&vec![0.0; 64], 2f64.powi(35));
        assert!(d.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn random_roundtrip_precision() {
        let enc = Encoder::new(4096);
        let mut s = 3;
        let scale = 2f64.powi(35);
        for _ in 0..20 {
            let values: Vec<f64> = (0..enc.slots()).map(|_| lcg(&mut s)).collect();
            let c = enc.encode(&values, scale, 1e18).unwrap();
            let cf: Vec<f64> = c.iter().map(|&x| x as f64).collect();
            let back = enc.decode(&cf, scale);
            let err = values.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "max error {err}");
        }
    }

    #[test]
    fn constant_vector_is_constant_polynomial() {
        let enc = Encoder::new(16);
        let c = enc.encode(&[0.25; 8], 1024.0, 1e18).unwrap();
        assert_eq!(c[0], 256);
        assert!(c[1..].iter().all(|&x| x == 0));
    }

    #[test]
    fn overflow_detected() {
        let enc = Encoder::new(16);
        assert!(matches!(
            enc.encode(&[1.0; 8], 2f64.powi(62), 2f64.powi(59)),
            Err(Error::EncodeOverflow(_))
        ));
        assert!(enc.encode(&[0.0; 9], 1.0, 1e18).is_err());
    }
}
