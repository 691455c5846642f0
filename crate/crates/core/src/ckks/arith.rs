//! Word-sized modular arithmetic for primes below 2^61.

/// A prime modulus together with its Barrett constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Modulus {
    value: u64,
    ratio_lo: u64,
    ratio_hi: u64,
}

impl Modulus {
    pub const MAX_BITS: u32 = 61;

    pub fn new(value: u64) -> Self {
        assert!(value > 1 && value < (1u64 << Self::MAX_BITS), "modulus out of range");
        // floor(2^128 / q) split in two words.
        let hi = u128::MAX / value as u128;
        let rem = u128::MAX % value as u128;
        let ratio = if rem + 1 == value as u128 { hi + 1 } else { hi };
        Self {
            value,
            ratio_lo: ratio as u64,
            ratio_hi: (ratio >> 64) as u64,
        }
    }

    #[inline]
    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn bits(&self) -> f64 {
        (self.value as f64).log2()
    }

    /// Barrett reduction of a 128-bit integer.
    #[inline]
    pub fn reduce_u128(&self, z: u128) -> u64 {
        let zlo = z as u64;
        let zhi = (z >> 64) as u64;
        let carry = ((zlo as u128 * self.ratio_lo as u128) >> 64) as u64;
        let t = zlo as u128 * self.ratio_hi as u128;
        let (tmp1, c1) = (t as u64).overflowing_add(carry);
        let tmp3 = ((t >> 64) as u64).wrapping_add(c1 as u64);
        let t = zhi as u128 * self.ratio_lo as u128;
        let (_, c2) = tmp1.overflowing_add(t as u64);
        let carry = ((t >> 64) as u64).wrapping_add(c2 as u64);
        let est = zhi
            .wrapping_mul(self.ratio_hi)
            .wrapping_add(tmp3)
            .wrapping_add(carry);
        let r = zlo.wrapping_sub(est.wrapping_mul(self.value));
        if r >= self.value {
            r - self.value
        } else {
            r
        }
    }

    #[inline]
    pub fn reduce(&self, a: u64) -> u64 {
        if a >= self.value {
            self.reduce_u128(a as u128)
        } else {
            a
        }
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a + b;
        if s >= self.value {
            s - self.value
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        if a >= b {
            a - b
        } else {
            a + self.value - b
        }
    }

    #[inline]
    pub fn neg(&self, a: u64) -> u64 {
        if a == 0 {
            0
        } else {
            self.value - a
        }
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        self.reduce_u128(a as u128 * b as u128)
    }

    /// Precomputed `floor(w * 2^64 / q)` for repeated multiplication by `w`.
    #[inline]
    pub fn shoup(&self, w: u64) -> u64 {
        (((w as u128) << 64) / self.value as u128) as u64
    }

    /// `a * w mod q` given `w_shoup = self.shoup(w)`.
    #[inline]
    pub fn mul_shoup(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let q_est = ((a as u128 * w_shoup as u128) >> 64) as u64;
        let r = a.wrapping_mul(w).wrapping_sub(q_est.wrapping_mul(self.value));
        if r >= self.value {
            r - self.value
        } else {
            r
        }
    }

    /// `a * w mod q` up to one extra `q`: result in `[0, 2q)`, any `a`.
    #[inline]
    pub fn mul_shoup_lazy(&self, a: u64, w: u64, w_shoup: u64) -> u64 {
        let q_est = ((a as u128 * w_shoup as u128) >> 64) as u64;
        a.wrapping_mul(w).wrapping_sub(q_est.wrapping_mul(self.value))
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base = self.reduce(base);
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Inverse via Fermat; the modulus is prime.
    pub fn inv(&self, a: u64) -> u64 {
        debug_assert!(!a.is_multiple_of(self.value));
        self.pow(a, self.value - 2)
    }

    /// Reduces a signed integer into `[0, q)`.
    #[inline]
    pub fn from_i64(&self, a: i64) -> u64 {
        if a >= 0 {
            self.reduce(a as u64)
        } else {
            self.neg(self.reduce(a.unsigned_abs()))
        }
    }

    /// Reduces an integral `f64` of any magnitude into `[0, q)`.
    pub fn from_f64(&self, x: f64) -> u64 {
        debug_assert!(x.is_finite());
        let neg = x < 0.0;
        let a = x.abs();
        let r = if a < 1.8e19 {
            self.reduce(a as u64)
        } else {
            // a = mantissa * 2^exp with a 53-bit mantissa.
            let bits = a.to_bits();
            let exp = ((bits >> 52) & 0x7ff) as i64 - 1075;
            let mant = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
            self.mul(self.reduce(mant), self.pow(2, exp as u64))
        };
        if neg {
            self.neg(r)
        } else {
            r
        }
    }

    /// Centered representative in `(-q/2, q/2]`.
    #[inline]
    pub fn center(&self, a: u64) -> i64 {
        if a > self.value / 2 {
            a as i64 - self.value as i64
        } else {
            a as i64
        }
    }
}

/// Deterministic Miller-Rabin for 64-bit integers.
pub fn is_prime(n: u64) -> bool {
    if n < 2 {
        return false;
    }
    for p in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        if n.is_multiple_of(p) {
            return n == p;
        }
    }
    let mut d = n - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    let mulmod = |a: u64, b: u64| ((a as u128 * b as u128) % n as u128) as u64;
    let powmod = |mut b: u64, mut e: u64| {
        let mut acc = 1u64;
        while e > 0 {
            if e & 1 == 1 {
                acc = mulmod(acc, b);
            }
            b = mulmod(b, b);
            e >>= 1;
        }
        acc
    };
    'witness: for a in [2u64, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37] {
        let mut x = powmod(a, d);
        if x == 1 || x == n - 1 {
            continue;
        }
        for _ in 1..s {
            x = mulmod(x, x);
            if x == n - 1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const Q60: u64 = 1152921504606846883; // largest prime below 2^60

    #[test]
    fn known_primes() {
        assert!(is_prime(Q60));
        assert!(is_prime(2013265921));
        assert!(!is_prime(2013265921 * 3));
        assert!(!is_prime(1));
        assert!(is_prime(2));
    }

    #[test]
    fn inverse_roundtrip() {
        let m = Modulus::new(Q60);
        for a in [1u64, 2, 12345, Q60 - 1] {
            assert_eq!(m.mul(a, m.inv(a)), 1);
        }
    }

    #[test]
    fn from_f64_large_values() {
        let m = Modulus::new(2013265921);
        let x = 2f64.powi(80) + 2f64.powi(40);
        let expected = m.add(m.pow(2, 80), m.pow(2, 40));
        assert_eq!(m.from_f64(x), expected);
        assert_eq!(m.from_f64(-x), m.neg(expected));
        assert_eq!(m.from_f64(-3.0), m.value() - 3);
    }

    proptest! {
        #[test]
        fn barrett_matches_u128_remainder(a in any::<u64>(), b in any::<u64>()) {
            let m = Modulus::new(Q60);
            let (a, b) = (a % Q60, b % Q60);
            let z = a as u128 * b as u128;
            prop_assert_eq!(m.reduce_u128(z), (z % Q60 as u128) as u64);
        }

        #[test]
        fn barrett_full_range(z in any::<u128>(), small in 2u64..(1 << 61)) {
            let m = Modulus::new(small);
            // Inputs up to q^2 are what the code feeds in.
            let z = z % (small as u128 * small as u128);
            prop_assert_eq!(m.reduce_u128(z), (z % small as u128) as u64);
        }

        #[test]
        fn shoup_matches_mul(a in any::<u64>(), w in any::<u64>()) {
            let m = Modulus::new(Q60);
            let (a, w) = (a % Q60, w % Q60);
            prop_assert_eq!(m.mul_shoup(a, w, m.shoup(w)), m.mul(a, w));
        }
    }
}
