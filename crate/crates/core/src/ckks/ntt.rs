//! Negacyclic number-theoretic transform over `Z_q[X]/(X^N + 1)`.
//!
//! Forward transform is Cooley-Tukey with the 2N-th root ψ folded into the
//! twiddles (bit-reversed order); the inverse is Gentleman-Sande. Outputs of
//! the forward transform are in bit-reversed order, which is irrelevant for
//! pointwise products.

use super::arith::Modulus;

#[derive(Debug, Clone)]
pub struct NttTable {
    modulus: Modulus,
    n: usize,
    psi_rev: Vec<u64>,
    psi_rev_shoup: Vec<u64>,
    psi_inv_rev: Vec<u64>,
    psi_inv_rev_shoup: Vec<u64>,
    n_inv: u64,
    n_inv_shoup: u64,
}

fn bit_reverse(mut x: usize, bits: u32) -> usize {
    let mut r = 0;
    for _ in 0..bits {
        r = (r << 1) | (x & 1);
        x >>= 1;
    }
    r
}

/// Finds a primitive `2n`-th root of unity modulo `q` (requires `q ≡ 1 mod 2n`).
pub fn primitive_root_2n(modulus: &Modulus, n: usize) -> Option<u64> {
    let q = modulus.value();
    let order = 2 * n as u64;
    if !(q - 1).is_multiple_of(order) {
        return None;
    }
    let cofactor = (q - 1) / order;
    (2..q.min(10_000)).find_map(|g| {
        let root = modulus.pow(g, cofactor);
        // root has order dividing 2n; it is primitive iff root^n = -1.
        (modulus.pow(root, n as u64) == q - 1).then_some(root)
    })
}

impl NttTable {
    pub fn new(modulus: Modulus, n: usize) -> Option<Self> {
        assert!(n.is_power_of_two() && n >= 2);
        let psi = primitive_root_2n(&modulus, n)?;
        let psi_inv = modulus.inv(psi);
        let bits = n.trailing_zeros();
        let mut psi_rev = vec![0u64; n];
        let mut psi_inv_rev = vec![0u64; n];
        let (mut p, mut pi) = (1u64, 1u64);
        for i in 0..n {
            let r = bit_reverse(i, bits);
            psi_rev[r] = p;
            psi_inv_rev[r] = pi;
            p = modulus.mul(p, psi);
            pi = modulus.mul(pi, psi_inv);
        }
        let psi_rev_shoup = psi_rev.iter().map(|&w| modulus.shoup(w)).collect();
        let psi_inv_rev_shoup = psi_inv_rev.iter().map(|&w| modulus.shoup(w)).collect();
        let n_inv = modulus.inv(n as u64);
        Some(Self {
            modulus,
            n,
            psi_rev,
            psi_rev_shoup,
            psi_inv_rev,
            psi_inv_rev_shoup,
            n_inv,
            n_inv_shoup: modulus.shoup(n_inv),
        })
    }

    pub fn modulus(&self) -> &Modulus {
        &self.modulus
    }

    /// Harvey butterflies: values stay in `[0, 4q)` until the final pass,
    /// which needs `q < 2^62`.
    pub fn forward(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = &self.modulus;
        let (q1, q2) = (q.value(), 2 * q.value());
        let n = self.n;
        let mut t = n;
        let mut m = 1;
        while m < n {
            t >>= 1;
            for i in 0..m {
                let w = self.psi_rev[m + i];
                let ws = self.psi_rev_shoup[m + i];
                let j1 = 2 * i * t;
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let mut u = *x;
                    if u >= q2 {
                        u -= q2;
                    }
                    let v = q.mul_shoup_lazy(*y, w, ws);
                    *x = u + v;
                    *y = u + q2 - v;
                }
            }
            m <<= 1;
        }
        for x in a.iter_mut() {
            if *x >= q2 {
                *x -= q2;
            }
            if *x >= q1 {
                *x -= q1;
            }
        }
    }

    pub fn inverse(&self, a: &mut [u64]) {
        debug_assert_eq!(a.len(), self.n);
        let q = &self.modulus;
        let q2 = 2 * q.value();
        let n = self.n;
        let mut t = 1;
        let mut m = n;
        while m > 1 {
            let h = m >> 1;
            for i in 0..h {
                let w = self.psi_inv_rev[h + i];
                let ws = self.psi_inv_rev_shoup[h + i];
                let j1 = 2 * i * t;
                let (lo, hi) = a[j1..j1 + 2 * t].split_at_mut(t);
                for (x, y) in lo.iter_mut().zip(hi.iter_mut()) {
                    let (u, v) = (*x, *y);
                    let mut s = u + v;
                    if s >= q2 {
                        s -= q2;
                    }
                    *x = s;
                    *y = q.mul_shoup_lazy(u + q2 - v, w, ws);
                }
            }
            t <<= 1;
            m = h;
        }
        for x in a.iter_mut() {
            *x = q.mul_shoup(*x, self.n_inv, self.n_inv_shoup);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckks::arith::is_prime;
    use proptest::prelude::*;

    fn ntt_prime(n: usize, bits: u32) -> u64 {
        let step = 2 * n as u64;
        let mut c = ((1u64 << bits) / step) * step + 1;
        while !is_prime(c) {
            c -= step;
        }
        c
    }

    /// Schoolbook negacyclic product, the oracle for the transform.
    fn negacyclic_naive(a: &[u64], b: &[u64], q: &Modulus) -> Vec<u64> {
        let n = a.len();
        let mut out = vec![0u64; n];
        for i in 0..n {
            for j in 0..n {
                let p = q.mul(a[i], b[j]);
                let k = i + j;
                if k < n {
                    out[k] = q.add(out[k], p);
                } else {
                    out[k - n] = q.sub(out[k - n], p);
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn forward_inverse_is_identity(seed in any::<u64>(), log_n in 1u32..11) {
            let n = 1usize << log_n;
            let q = Modulus::new(ntt_prime(n, 50));
            let table = NttTable::new(q, n).unwrap();
            let mut state = seed | 1;
            let a: Vec<u64> = (0..n).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                state % q.value()
            }).collect();
            let mut b = a.clone();
            table.forward(&mut b);
            table.inverse(&mut b);
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn pointwise_product_is_negacyclic_convolution() {
        for &n in &[4usize, 16, 64] {
            let q = Modulus::new(ntt_prime(n, 40));
            let table = NttTable::new(q, n).unwrap();
            let a: Vec<u64> = (0..n as u64).map(|i| (i * 7919 + 3) % q.value()).collect();
            let b: Vec<u64> = (0..n as u64).map(|i| q.value() - 1 - i * 31).collect();
            let expected = negacyclic_naive(&a, &b, &q);
            let (mut fa, mut fb) = (a.clone(), b.clone());
            table.forward(&mut fa);
            table.forward(&mut fb);
            let mut prod: Vec<u64> = fa.iter().zip(&fb).map(|(x, y)| q.mul(*x, *y)).collect();
            table.inverse(&mut prod);
            assert_eq!(prod, expected, "n = {n}");
        }
    }

    #[test]
    fn roundtrip_near_62_bits() {
        let n = 1024;
        let q = Modulus::new(ntt_prime(n, 61));
        let table = NttTable::new(q, n).unwrap();
        let a: Vec<u64> = (0..n as u64).map(|i| q.value() - 1 - i * i).collect();
        let mut b = a.clone();
        table.forward(&mut b);
        assert!(b.iter().all(|&x| x < q.value()));
        table.inverse(&mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_unfriendly_prime() {
        // 2^31 - 1 is prime but not 1 mod 16.
        assert!(NttTable::new(Modulus::new(2147483647), 8).is_none());
    }
}
