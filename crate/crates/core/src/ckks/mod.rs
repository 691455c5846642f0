//! RNS variant of the approximate-arithmetic scheme: ring `Z_Q[X]/(X^N + 1)`,
//! fixed-point encodings at scale 2^r, rescaling by one chain prime per
//! multiplication, and hybrid key switching with a single special prime.
//!
//! Ciphertexts are kept in NTT form. Alongside each ciphertext a variance
//! estimate of the slot error (in integer units) is propagated; decryption
//! refuses results whose estimated error bound reaches the scale.

pub mod arith;
pub mod chain;
pub mod encoding;
pub mod ntt;
pub mod poly;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};

use crate::backend::{
    check_fingerprint, check_key, product_level_scale, scales_match, BackendKind, CipherText,
    HeBackend, KeySet, KeyTag, PlainVec, Slots,
};
use crate::error::{Error, Result};
use crate::params::HeParams;
use crate::rng;
use crate::wire;
use arith::Modulus;
use chain::{build_chain, ModulusChain};
use encoding::Encoder;
use ntt::NttTable;
use poly::RnsPoly;

/// Standard deviation of the discrete Gaussian error.
pub const ERROR_STD: f64 = 3.2;
/// Declared error bound, in standard deviations of the tracked estimate.
pub const NOISE_TAIL: f64 = 8.0;
const GAUSS_CLIP: f64 = 6.0 * ERROR_STD;
const MAX_ENCODE_MAGNITUDE: f64 = 4.6e18;

#[derive(Debug, Clone)]
pub struct CkksCiphertext {
    c0: RnsPoly,
    c1: RnsPoly,
    level: usize,
    scale: f64,
    /// Variance of the slot error, in units of the integer encoding.
    noise_var: f64,
    fingerprint: u64,
    key_id: u64,
}

impl CkksCiphertext {
    /// log2 of the declared error bound, in integer units.
    pub fn noise_bits(&self) -> f64 {
        (NOISE_TAIL * self.noise_var.sqrt()).log2()
    }

    /// Declared bound on the absolute slot error after decryption.
    pub fn error_bound(&self) -> f64 {
        NOISE_TAIL * self.noise_var.sqrt() / self.scale
    }
}

impl CipherText for CkksCiphertext {
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
        self.c0.byte_size() + self.c1.byte_size()
    }
}

pub struct SecretKey {
    fingerprint: u64,
    key_id: u64,
    coeffs: Vec<i8>,
    /// NTT form over every chain prime and the special prime.
    s: RnsPoly,
}

pub struct PublicKey {
    fingerprint: u64,
    key_id: u64,
    b: RnsPoly,
    a: RnsPoly,
}

/// Relinearization key: one `(b_i, a_i)` pair per chain prime, encrypting
/// `P * s^2` in the `i`-th RNS digit.
pub struct RelinKey {
    fingerprint: u64,
    key_id: u64,
    b: Vec<RnsPoly>,
    a: Vec<RnsPoly>,
}

macro_rules! key_tag {
    ($($t:ty),*) => {$(
        impl KeyTag for $t {
            fn fingerprint(&self) -> u64 { self.fingerprint }
            fn key_id(&self) -> u64 { self.key_id }
        }
    )*};
}
key_tag!(SecretKey, PublicKey, RelinKey);

pub struct CkksBackend {
    params: HeParams,
    chain: ModulusChain,
    n: usize,
    /// Chain primes followed by the special prime.
    moduli: Vec<Modulus>,
    ntt: Vec<NttTable>,
    encoder: Encoder,
    fingerprint: u64,
    /// `P^{-1} mod q_j`, with Shoup companions.
    special_inv: Vec<(u64, u64)>,
    /// `prime_inv[l][j] = q_l^{-1} mod q_j` for `j < l`.
    prime_inv: Vec<Vec<(u64, u64)>>,
    /// `log2` of the product of primes active at each level.
    level_bits: Vec<f64>,
}

impl CkksBackend {
    fn special_index(&self) -> usize {
        self.moduli.len() - 1
    }

    /// Modulus indices of the extended basis at `level`.
    fn ext_basis(&self, level: usize) -> Vec<usize> {
        (0..=level).chain([self.special_index()]).collect()
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    fn small_to_ntt(&self, coeffs: &[i64], basis: &[usize]) -> RnsPoly {
        let mut p = RnsPoly::zero(self.n, basis.len());
        for (pos, &t) in basis.iter().enumerate() {
            let q = &self.moduli[t];
            let r = p.residue_mut(pos);
            for (x, &c) in r.iter_mut().zip(coeffs) {
                *x = q.from_i64(c);
            }
            self.ntt[t].forward(r);
        }
        p
    }

    fn uniform<R: RngCore + ?Sized>(&self, basis: &[usize], rng: &mut R) -> RnsPoly {
        let mut p = RnsPoly::zero(self.n, basis.len());
        for (pos, &t) in basis.iter().enumerate() {
            let q = self.moduli[t].value();
            for x in p.residue_mut(pos) {
                *x = rng.random_range(0..q);
            }
        }
        p
    }

    fn ternary<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        (0..self.n).map(|_| rng.random_range(-1i64..=1)).collect()
    }

    fn gaussian<R: RngCore + ?Sized>(&self, rng: &mut R) -> Vec<i64> {
        let normal = Normal::new(0.0, ERROR_STD).expect("valid deviation");
        (0..self.n)
            .map(|_| normal.sample(rng).clamp(-GAUSS_CLIP, GAUSS_CLIP).round() as i64)
            .collect()
    }

    /// Divides by the modulus of the last residue (index `last` in `moduli`)
    /// with rounding, keeping the first `keep` residues.
    fn drop_last(&self, p: &RnsPoly, keep: usize, last: usize, inv: &[(u64, u64)]) -> RnsPoly {
        debug_assert_eq!(p.residues(), keep + 1);
        let lm = self.moduli[last];
        let half = lm.value() / 2;
        let mut top = p.residue(keep).to_vec();
        self.ntt[last].inverse(&mut top);
        let mut out = RnsPoly::zero(self.n, keep);
        let mut t = vec![0u64; self.n];
        for j in 0..keep {
            let q = &self.moduli[j];
            for (x, &v) in t.iter_mut().zip(&top) {
                *x = if v > half {
                    q.neg(q.reduce(lm.value() - v))
                } else {
                    q.reduce(v)
                };
            }
            self.ntt[j].forward(&mut t);
            let (w, ws) = inv[j];
            let src = p.residue(j);
            for ((o, &a), &b) in out.residue_mut(j).iter_mut().zip(src).zip(&t) {
                *o = q.mul_shoup(q.sub(a, b), w, ws);
            }
        }
        out
    }

    fn mod_down(&self, p: &RnsPoly, level: usize) -> RnsPoly {
        self.drop_last(p, level + 1, self.special_index(), &self.special_inv)
    }

    fn rescale_poly(&self, p: &RnsPoly, level: usize) -> RnsPoly {
        self.drop_last(p, level, level, &self.prime_inv[level])
    }

    fn add_into(&self, acc: &mut RnsPoly, other: &RnsPoly) {
        for j in 0..acc.residues() {
            let q = self.moduli[j];
            for (a, &b) in acc.residue_mut(j).iter_mut().zip(other.residue(j)) {
                *a = q.add(*a, b);
            }
        }
    }

    /// Key switching of `d2` (NTT form at `level`) under the relinearization
    /// key: returns `(r0, r1)` with `r0 + r1*s ≈ d2*s^2`.
    fn relinearize(&self, rk: &RelinKey, d2: &RnsPoly, level: usize) -> (RnsPoly, RnsPoly) {
        let k = level + 1;
        let n = self.n;
        let digits: Vec<Vec<u64>> = (0..k)
            .map(|i| {
                let mut d = d2.residue(i).to_vec();
                self.ntt[i].inverse(&mut d);
                d
            })
            .collect();
        let basis = self.ext_basis(level);
        let mut r0 = RnsPoly::zero(n, basis.len());
        let mut r1 = RnsPoly::zero(n, basis.len());
        let mut acc0 = vec![0u128; n];
        let mut acc1 = vec![0u128; n];
        let mut x = vec![0u64; n];
        for (pos, &t) in basis.iter().enumerate() {
            let q = self.moduli[t];
            acc0.iter_mut().for_each(|a| *a = 0);
            acc1.iter_mut().for_each(|a| *a = 0);
            for (i, digit) in digits.iter().enumerate() {
                let xs: &[u64] = if i == t {
                    d2.residue(i)
                } else {
                    for (o, &v) in x.iter_mut().zip(digit) {
                        *o = q.reduce(v);
                    }
                    self.ntt[t].forward(&mut x);
                    &x
                };
                let kb = rk.b[i].residue(t);
                let ka = rk.a[i].residue(t);
                for j in 0..n {
                    let v = xs[j] as u128;
                    acc0[j] += v * kb[j] as u128;
                    acc1[j] += v * ka[j] as u128;
                }
                if i % 32 == 31 {
                    for j in 0..n {
                        acc0[j] = q.reduce_u128(acc0[j]) as u128;
                        acc1[j] = q.reduce_u128(acc1[j]) as u128;
                    }
                }
            }
            for (o, &a) in r0.residue_mut(pos).iter_mut().zip(&acc0) {
                *o = q.reduce_u128(a);
            }
            for (o, &a) in r1.residue_mut(pos).iter_mut().zip(&acc1) {
                *o = q.reduce_u128(a);
            }
        }
        (self.mod_down(&r0, level), self.mod_down(&r1, level))
    }

    /// Plaintext in NTT form over the primes active at `level`.
    fn encode_plain(&self, pt: &PlainVec, scale: f64, level: usize) -> Result<RnsPoly> {
        pt.check_len(self.params.slots)?;
        let bound = MAX_ENCODE_MAGNITUDE.min(2f64.powf(self.level_bits[level] - 1.0));
        let mut p = RnsPoly::zero(self.n, level + 1);
        match &pt.slots {
            Slots::Broadcast(c) => {
                let x = self.encoder.encode_constant(*c, scale, bound)?;
                for j in 0..=level {
                    let v = self.moduli[j].from_i64(x);
                    p.residue_mut(j).iter_mut().for_each(|o| *o = v);
                }
            }
            Slots::Values(vals) => {
                let coeffs = self.encoder.encode(vals, scale, bound)?;
                for j in 0..=level {
                    let q = &self.moduli[j];
                    let r = p.residue_mut(j);
                    for (o, &c) in r.iter_mut().zip(&coeffs) {
                        *o = q.from_i64(c);
                    }
                    self.ntt[j].forward(r);
                }
            }
        }
        Ok(p)
    }

    fn n_f(&self) -> f64 {
        self.n as f64
    }

    /// Slot-error variance of rounding a ciphertext (rescale, mod-down).
    fn rounding_var(&self) -> f64 {
        let n = self.n_f();
        n * (1.0 + 2.0 * n / 3.0) / 12.0
    }

    fn encoding_var(&self, pt: &PlainVec) -> f64 {
        match pt.slots {
            Slots::Broadcast(_) => 1.0 / 12.0,
            Slots::Values(_) => self.n_f() / 12.0,
        }
    }

    fn keyswitch_var(&self, level: usize) -> f64 {
        let n = self.n_f();
        let p = self.moduli[self.special_index()].value() as f64;
        let digits: f64 = (0..=level)
            .map(|i| (self.moduli[i].value() as f64 / p).powi(2) / 3.0)
            .sum();
        n * n * ERROR_STD * ERROR_STD * digits + self.rounding_var()
    }

    fn check_encrypt_args(&self, pt: &PlainVec, level: usize) -> Result<()> {
        if level > self.chain.levels() {
            return Err(Error::InvalidParams(format!(
                "level {level} exceeds chain capacity {}",
                self.chain.levels()
            )));
        }
        if !(pt.scale.is_finite() && pt.scale > 0.0) {
            return Err(Error::InvalidParams(format!("invalid scale {}", pt.scale)));
        }
        Ok(())
    }

    fn check_ct(&self, ct: &CkksCiphertext) -> Result<()> {
        check_fingerprint(self.fingerprint, ct.fingerprint)
    }

    fn check_pair(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<()> {
        self.check_ct(a)?;
        self.check_ct(b)?;
        check_key(a.key_id, b.key_id)
    }

    fn to_coeff(&self, p: &RnsPoly) -> Vec<u64> {
        let mut out = p.data().to_vec();
        for (j, r) in out.chunks_exact_mut(self.n).enumerate() {
            self.ntt[j].inverse(r);
        }
        out
    }

    fn coeff_poly(&self, data: Vec<u64>) -> RnsPoly {
        let mut p = RnsPoly::from_data(self.n, data);
        for j in 0..p.residues() {
            self.ntt[j].forward(p.residue_mut(j));
        }
        p
    }

    fn read_poly(&self, r: &mut dyn Read, residues: usize) -> Result<RnsPoly> {
        let data = wire::read_u64s(r, residues * self.n)?;
        if data.len() != residues * self.n {
            return Err(Error::Format("polynomial has the wrong number of residues".into()));
        }
        Ok(RnsPoly::from_data(self.n, data))
    }
}

impl HeBackend for CkksBackend {
    type Ciphertext = CkksCiphertext;
    type SecretKey = SecretKey;
    type PublicKey = PublicKey;
    type EvalKey = RelinKey;

    const KIND: BackendKind = BackendKind::Ckks;

    fn new(params: HeParams) -> Result<Self> {
        let chain = build_chain(&params)?;
        let n = params.ring_degree;
        let moduli: Vec<Modulus> = chain
            .primes()
            .iter()
            .chain([&chain.special()])
            .map(|&q| Modulus::new(q))
            .collect();
        let ntt = moduli
            .iter()
            .map(|&q| {
                NttTable::new(q, n)
                    .ok_or_else(|| Error::Chain(format!("prime {} is not NTT friendly", q.value())))
            })
            .collect::<Result<Vec<_>>>()?;
        let p = chain.special();
        let with_shoup = |q: &Modulus, v: u64| (v, q.shoup(v));
        let special_inv = moduli[..chain.primes().len()]
            .iter()
            .map(|q| with_shoup(q, q.inv(q.reduce(p))))
            .collect();
        let prime_inv = (0..chain.primes().len())
            .map(|l| {
                (0..l)
                    .map(|j| {
                        let q = &moduli[j];
                        with_shoup(q, q.inv(q.reduce(chain.primes()[l])))
                    })
                    .collect()
            })
            .collect();
        let mut level_bits = Vec::new();
        let mut acc = 0.0;
        for q in &moduli[..chain.primes().len()] {
            acc += q.bits();
            level_bits.push(acc);
        }
        Ok(Self {
            fingerprint: params.fingerprint(),
            encoder: Encoder::new(n),
            params,
            chain,
            n,
            moduli,
            ntt,
            special_inv,
            prime_inv,
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
        let seed = self.params.seed;
        let key_id = rng::key_id(self.fingerprint, seed);
        let mut rng = rng::stream(seed, "ckks-keygen", 0);
        let full: Vec<usize> = (0..self.moduli.len()).collect();
        let s_coeffs = self.ternary(&mut rng);
        let s = self.small_to_ntt(&s_coeffs, &full);

        // b = -a*s + e over every modulus.
        let mut sample_pair = |extra: Option<usize>| {
            let a = self.uniform(&full, &mut rng);
            let e = self.small_to_ntt(&self.gaussian(&mut rng), &full);
            let mut b = RnsPoly::zero(self.n, full.len());
            for t in 0..full.len() {
                let q = self.moduli[t];
                let (sa, ea, aa) = (s.residue(t), e.residue(t), a.residue(t));
                for (j, o) in b.residue_mut(t).iter_mut().enumerate() {
                    *o = q.sub(ea[j], q.mul(aa[j], sa[j]));
                }
                if extra == Some(t) {
                    let pm = q.reduce(self.chain.special());
                    for (j, o) in b.residue_mut(t).iter_mut().enumerate() {
                        let s2 = q.mul(sa[j], sa[j]);
                        *o = q.add(*o, q.mul(pm, s2));
                    }
                }
            }
            (b, a)
        };
        let (pb, pa) = sample_pair(None);
        let mut rb = Vec::new();
        let mut ra = Vec::new();
        for i in 0..self.chain.primes().len() {
            let (b, a) = sample_pair(Some(i));
            rb.push(b);
            ra.push(a);
        }
        let fingerprint = self.fingerprint;
        Ok(KeySet {
            secret: SecretKey {
                fingerprint,
                key_id,
                coeffs: s_coeffs.iter().map(|&c| c as i8).collect(),
                s,
            },
            public: PublicKey {
                fingerprint,
                key_id,
                b: pb,
                a: pa,
            },
            eval: RelinKey {
                fingerprint,
                key_id,
                b: rb,
                a: ra,
            },
        })
    }

    fn encrypt_at<R: RngCore + ?Sized>(
        &self,
        pk: &PublicKey,
        pt: &PlainVec,
        level: usize,
        rng: &mut R,
    ) -> Result<CkksCiphertext> {
        check_fingerprint(self.fingerprint, pk.fingerprint)?;
        self.check_encrypt_args(pt, level)?;
        let m = self.encode_plain(pt, pt.scale, level)?;
        let basis = self.ext_basis(level);
        let v = self.ternary(rng);
        let e0 = self.gaussian(rng);
        let e1 = self.gaussian(rng);
        let vn = self.small_to_ntt(&v, &basis);
        let e0n = self.small_to_ntt(&e0, &basis);
        let e1n = self.small_to_ntt(&e1, &basis);
        let mut c0 = RnsPoly::zero(self.n, basis.len());
        let mut c1 = RnsPoly::zero(self.n, basis.len());
        for (pos, &t) in basis.iter().enumerate() {
            let q = self.moduli[t];
            let (vr, br, ar) = (vn.residue(pos), pk.b.residue(t), pk.a.residue(t));
            let (f0, f1) = (e0n.residue(pos), e1n.residue(pos));
            for (j, o) in c0.residue_mut(pos).iter_mut().enumerate() {
                *o = q.add(q.mul(vr[j], br[j]), f0[j]);
            }
            for (j, o) in c1.residue_mut(pos).iter_mut().enumerate() {
                *o = q.add(q.mul(vr[j], ar[j]), f1[j]);
            }
        }
        let mut c0 = self.mod_down(&c0, level);
        let c1 = self.mod_down(&c1, level);
        self.add_into(&mut c0, &m);
        Ok(CkksCiphertext {
            c0,
            c1,
            level,
            scale: pt.scale,
            noise_var: self.rounding_var() + self.encoding_var(pt),
            fingerprint: self.fingerprint,
            key_id: pk.key_id,
        })
    }

    fn encrypt_symmetric_at<R: RngCore + ?Sized>(
        &self,
        sk: &SecretKey,
        pt: &PlainVec,
        level: usize,
        rng: &mut R,
    ) -> Result<CkksCiphertext> {
        check_fingerprint(self.fingerprint, sk.fingerprint)?;
        self.check_encrypt_args(pt, level)?;
        let m = self.encode_plain(pt, pt.scale, level)?;
        let basis: Vec<usize> = (0..=level).collect();
        let a = self.uniform(&basis, rng);
        let mut c0 = self.small_to_ntt(&self.gaussian(rng), &basis);
        for j in basis {
            let q = self.moduli[j];
            let (ar, sr, mr) = (a.residue(j), sk.s.residue(j), m.residue(j));
            for (i, o) in c0.residue_mut(j).iter_mut().enumerate() {
                *o = q.sub(q.add(*o, mr[i]), q.mul(ar[i], sr[i]));
            }
        }
        Ok(CkksCiphertext {
            c0,
            c1: a,
            level,
            scale: pt.scale,
            noise_var: self.n_f() * ERROR_STD * ERROR_STD + self.encoding_var(pt),
            fingerprint: self.fingerprint,
            key_id: sk.key_id,
        })
    }

    fn decrypt(&self, sk: &SecretKey, ct: &CkksCiphertext) -> Result<PlainVec> {
        self.check_ct(ct)?;
        check_fingerprint(self.fingerprint, sk.fingerprint)?;
        check_key(ct.key_id, sk.key_id)?;
        let used = (ct.level + 1).min(2);
        let mut res = Vec::with_capacity(used);
        for j in 0..used {
            let q = self.moduli[j];
            let mut r: Vec<u64> = ct
                .c0
                .residue(j)
                .iter()
                .zip(ct.c1.residue(j))
                .zip(sk.s.residue(j))
                .map(|((&a, &b), &s)| q.add(a, q.mul(b, s)))
                .collect();
            self.ntt[j].inverse(&mut r);
            res.push(r);
        }
        let coeffs: Vec<f64> = if used == 1 {
            res[0].iter().map(|&x| self.moduli[0].center(x) as f64).collect()
        } else {
            let (m0, m1) = (self.moduli[0], self.moduli[1]);
            let q0_inv = m1.inv(m1.reduce(m0.value()));
            let big = m0.value() as u128 * m1.value() as u128;
            res[0]
                .iter()
                .zip(&res[1])
                .map(|(&a0, &a1)| {
                    let k = m1.mul(m1.sub(a1, m1.reduce(a0)), q0_inv);
                    let x = a0 as u128 + m0.value() as u128 * k as u128;
                    if x > big / 2 {
                        -((big - x) as f64)
                    } else {
                        x as f64
                    }
                })
                .collect()
        };
        let bound = NOISE_TAIL * ct.noise_var.sqrt();
        if bound >= ct.scale {
            return Err(Error::NoiseBudgetExceeded {
                noise_bits: bound.log2(),
                scale_bits: ct.scale.log2(),
            });
        }
        Ok(PlainVec::new(self.encoder.decode(&coeffs, ct.scale), ct.scale))
    }

    fn add(&self, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext> {
        self.check_pair(a, b)?;
        if !scales_match(a.scale, b.scale) {
            return Err(Error::ScaleMismatch(a.scale, b.scale));
        }
        let level = a.level.min(b.level);
        let mut c0 = a.c0.truncated(level + 1);
        let mut c1 = a.c1.truncated(level + 1);
        self.add_into(&mut c0, &b.c0);
        self.add_into(&mut c1, &b.c1);
        Ok(CkksCiphertext {
            c0,
            c1,
            level,
            scale: a.scale,
            noise_var: a.noise_var + b.noise_var,
            fingerprint: a.fingerprint,
            key_id: a.key_id,
        })
    }

    fn add_plain(&self, a: &CkksCiphertext, pt: &PlainVec) -> Result<CkksCiphertext> {
        self.check_ct(a)?;
        if !scales_match(a.scale, pt.scale) {
            return Err(Error::ScaleMismatch(a.scale, pt.scale));
        }
        let m = self.encode_plain(pt, a.scale, a.level)?;
        let mut out = a.clone();
        self.add_into(&mut out.c0, &m);
        out.noise_var += self.encoding_var(pt);
        Ok(out)
    }

    fn mul(&self, ek: &RelinKey, a: &CkksCiphertext, b: &CkksCiphertext) -> Result<CkksCiphertext> {
        self.inner_product(ek, &[a], &[b])
    }

    fn mul_plain(&self, a: &CkksCiphertext, pt: &PlainVec) -> Result<CkksCiphertext> {
        self.check_ct(a)?;
        let (level, scale) =
            product_level_scale(&self.chain, (a.level, a.scale), (a.level, pt.scale))?;
        let m = self.encode_plain(pt, pt.scale, a.level)?;
        let mut c0 = a.c0.clone();
        let mut c1 = a.c1.clone();
        for j in 0..=a.level {
            let q = self.moduli[j];
            let mr = m.residue(j);
            for (x, &y) in c0.residue_mut(j).iter_mut().zip(mr) {
                *x = q.mul(*x, y);
            }
            for (x, &y) in c1.residue_mut(j).iter_mut().zip(mr) {
                *x = q.mul(*x, y);
            }
        }
        let q = self.chain.rescale_prime(a.level) as f64;
        let sp = pt.scale * pt.max_abs().max(f64::MIN_POSITIVE);
        let pre = a.noise_var * sp * sp + self.encoding_var(pt) * a.scale * a.scale;
        Ok(CkksCiphertext {
            c0: self.rescale_poly(&c0, a.level),
            c1: self.rescale_poly(&c1, a.level),
            level,
            scale,
            noise_var: pre / (q * q) + self.rounding_var(),
            fingerprint: a.fingerprint,
            key_id: a.key_id,
        })
    }

    /// Tensors every pair, then relinearizes and rescales once.
    fn inner_product(
        &self,
        ek: &RelinKey,
        xs: &[&CkksCiphertext],
        ws: &[&CkksCiphertext],
    ) -> Result<CkksCiphertext> {
        if xs.is_empty() || xs.len() != ws.len() {
            return Err(Error::Dimension(format!(
                "inner product of {} and {} ciphertexts",
                xs.len(),
                ws.len()
            )));
        }
        check_fingerprint(self.fingerprint, ek.fingerprint)?;
        let key_id = xs[0].key_id;
        let mut level = usize::MAX;
        for (x, w) in xs.iter().zip(ws) {
            self.check_pair(x, w)?;
            check_key(key_id, x.key_id)?;
            level = level.min(x.level).min(w.level);
        }
        check_key(key_id, ek.key_id)?;
        let (out_level, scale) =
            product_level_scale(&self.chain, (level, xs[0].scale), (level, ws[0].scale))?;
        let prod_scale = xs[0].scale * ws[0].scale;
        let k = level + 1;
        let mut pre = 0.0;
        for (x, w) in xs.iter().zip(ws) {
            if !scales_match(x.scale * w.scale, prod_scale) {
                return Err(Error::ScaleMismatch(x.scale * w.scale, prod_scale));
            }
            pre += x.noise_var * w.scale * w.scale
                + w.noise_var * x.scale * x.scale
                + x.noise_var * w.noise_var;
        }
        let n = self.n;
        let mut d0 = RnsPoly::zero(n, k);
        let mut d1 = RnsPoly::zero(n, k);
        let mut d2 = RnsPoly::zero(n, k);
        // Products are below 2^122; the cross term sums two per pair, so
        // reducing every 32 pairs keeps the u128 accumulators from overflowing.
        let mut acc = vec![[0u128; 3]; n];
        for j in 0..k {
            let q = self.moduli[j];
            acc.iter_mut().for_each(|a| *a = [0; 3]);
            for (idx, (x, w)) in xs.iter().zip(ws).enumerate() {
                let (a0, a1, b0, b1) = (x.c0.residue(j), x.c1.residue(j), w.c0.residue(j), w.c1.residue(j));
                for i in 0..n {
                    let (x0, x1, y0, y1) = (a0[i] as u128, a1[i] as u128, b0[i] as u128, b1[i] as u128);
                    let s = &mut acc[i];
                    s[0] += x0 * y0;
                    s[1] += x0 * y1 + x1 * y0;
                    s[2] += x1 * y1;
                }
                if idx % 32 == 31 {
                    for s in acc.iter_mut() {
                        *s = s.map(|v| q.reduce_u128(v) as u128);
                    }
                }
            }
            for (i, s) in acc.iter().enumerate() {
                d0.residue_mut(j)[i] = q.reduce_u128(s[0]);
                d1.residue_mut(j)[i] = q.reduce_u128(s[1]);
                d2.residue_mut(j)[i] = q.reduce_u128(s[2]);
            }
        }
        let (k0, k1) = self.relinearize(ek, &d2, level);
        self.add_into(&mut d0, &k0);
        self.add_into(&mut d1, &k1);
        let q = self.chain.rescale_prime(level) as f64;
        Ok(CkksCiphertext {
            c0: self.rescale_poly(&d0, level),
            c1: self.rescale_poly(&d1, level),
            level: out_level,
            scale,
            noise_var: (pre + self.keyswitch_var(level)) / (q * q) + self.rounding_var(),
            fingerprint: self.fingerprint,
            key_id,
        })
    }

    fn write_ciphertext_payload(&self, ct: &CkksCiphertext, w: &mut dyn Write) -> Result<()> {
        wire::write_u32(w, ct.level as u32)?;
        wire::write_f64(w, ct.scale)?;
        wire::write_f64(w, ct.noise_var)?;
        wire::write_u64(w, ct.key_id)?;
        wire::write_u64s(w, self.chain.active(ct.level))?;
        wire::write_u64s(w, &self.to_coeff(&ct.c0))?;
        wire::write_u64s(w, &self.to_coeff(&ct.c1))
    }

    fn read_ciphertext_payload(&self, r: &mut dyn Read) -> Result<CkksCiphertext> {
        let level = wire::read_u32(r)? as usize;
        if level > self.max_level() {
            return Err(Error::Format(format!("ciphertext level {level} beyond the chain")));
        }
        let scale = wire::read_f64(r)?;
        let noise_var = wire::read_f64(r)?;
        let key_id = wire::read_u64(r)?;
        let primes = wire::read_u64s(r, level + 1)?;
        if primes != self.chain.active(level) {
            return Err(Error::Format("ciphertext chain descriptor does not match the parameters".into()));
        }
        let c0 = self.read_poly(r, level + 1)?;
        let c1 = self.read_poly(r, level + 1)?;
        for p in [&c0, &c1] {
            for j in 0..=level {
                if p.residue(j).iter().any(|&x| x >= self.moduli[j].value()) {
                    return Err(Error::Format("unreduced ciphertext residue".into()));
                }
            }
        }
        Ok(CkksCiphertext {
            c0: self.coeff_poly(c0.data().to_vec()),
            c1: self.coeff_poly(c1.data().to_vec()),
            level,
            scale,
            noise_var,
            fingerprint: self.fingerprint,
            key_id,
        })
    }

    fn write_secret_key_payload(&self, k: &SecretKey, w: &mut dyn Write) -> Result<()> {
        wire::write_u64(w, k.key_id)?;
        w.write_all(&k.coeffs.iter().map(|&c| c as u8).collect::<Vec<_>>())?;
        Ok(())
    }

    fn read_secret_key_payload(&self, r: &mut dyn Read) -> Result<SecretKey> {
        let key_id = wire::read_u64(r)?;
        let mut buf = vec![0u8; self.n];
        r.read_exact(&mut buf)?;
        let coeffs: Vec<i8> = buf.into_iter().map(|b| b as i8).collect();
        if coeffs.iter().any(|c| c.abs() > 1) {
            return Err(Error::Format("secret key is not ternary".into()));
        }
        let wide: Vec<i64> = coeffs.iter().map(|&c| c as i64).collect();
        let full: Vec<usize> = (0..self.moduli.len()).collect();
        Ok(SecretKey {
            fingerprint: self.fingerprint,
            key_id,
            s: self.small_to_ntt(&wide, &full),
            coeffs,
        })
    }

    fn write_public_key_payload(&self, k: &PublicKey, w: &mut dyn Write) -> Result<()> {
        wire::write_u64(w, k.key_id)?;
        wire::write_u64s(w, k.b.data())?;
        wire::write_u64s(w, k.a.data())
    }

    fn read_public_key_payload(&self, r: &mut dyn Read) -> Result<PublicKey> {
        let key_id = wire::read_u64(r)?;
        let m = self.moduli.len();
        Ok(PublicKey {
            fingerprint: self.fingerprint,
            key_id,
            b: self.read_poly(r, m)?,
            a: self.read_poly(r, m)?,
        })
    }

    fn write_eval_key_payload(&self, k: &RelinKey, w: &mut dyn Write) -> Result<()> {
        wire::write_u64(w, k.key_id)?;
        wire::write_u64(w, k.b.len() as u64)?;
        for (b, a) in k.b.iter().zip(&k.a) {
            wire::write_u64s(w, b.data())?;
            wire::write_u64s(w, a.data())?;
        }
        Ok(())
    }

    fn read_eval_key_payload(&self, r: &mut dyn Read) -> Result<RelinKey> {
        let key_id = wire::read_u64(r)?;
        let digits = wire::read_u64(r)? as usize;
        if digits != self.chain.primes().len() {
            return Err(Error::Format(format!("evaluation key has {digits} digits")));
        }
        let m = self.moduli.len();
        let mut b = Vec::with_capacity(digits);
        let mut a = Vec::with_capacity(digits);
        for _ in 0..digits {
            b.push(self.read_poly(r, m)?);
            a.push(self.read_poly(r, m)?);
        }
        Ok(RelinKey {
            fingerprint: self.fingerprint,
            key_id,
            b,
            a,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::derive_params;

    fn backend(m: usize, l: u32) -> (CkksBackend, KeySet<CkksBackend>) {
        let b = CkksBackend::new(derive_params(m, l, 30, 11).unwrap()).unwrap();
        let k = b.keygen().unwrap();
        (b, k)
    }

    fn max_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn encrypt_decrypt_roundtrip() {
        let (b, k) = backend(1 << 11, 200);
        let vals: Vec<f64> = (0..b.slots()).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut r = rng::stream(1, "t", 0);
        let ct = b.encrypt(&k.public, &PlainVec::new(vals.clone(), 2f64.powi(30)), &mut r).unwrap();
        let out = b.decrypt(&k.secret, &ct).unwrap();
        assert!(max_err(&vals, out.values()) < 1e-5);
        assert!(max_err(&vals, out.values()) <= ct.error_bound());
    }

    #[test]
    fn multiply_relinearize_rescale() {
        let (b, k) = backend(1 << 11, 200);
        let s = 2f64.powi(30);
        let x: Vec<f64> = (0..b.slots()).map(|i| (i as f64 * 0.1).cos()).collect();
        let y: Vec<f64> = (0..b.slots()).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut r = rng::stream(2, "t", 0);
        let cx = b.encrypt(&k.public, &PlainVec::new(x.clone(), s), &mut r).unwrap();
        let cy = b.encrypt(&k.public, &PlainVec::new(y.clone(), s), &mut r).unwrap();
        let top = b.max_level();
        let p = b.mul(&k.eval, &cx, &cy).unwrap();
        assert_eq!(p.level(), top - 1);
        let want: Vec<f64> = x.iter().zip(&y).map(|(a, c)| a * c).collect();
        let got = b.decrypt(&k.secret, &p).unwrap();
        assert!(max_err(&want, got.values()) < 1e-4, "{}", max_err(&want, got.values()));
    }

    #[test]
    fn plain_multiply_and_add() {
        let (b, k) = backend(1 << 10, 200);
        let s = 2f64.powi(30);
        let x: Vec<f64> = (0..b.slots()).map(|i| i as f64 / b.slots() as f64).collect();
        let mut r = rng::stream(3, "t", 0);
        let cx = b.encrypt(&k.public, &PlainVec::new(x.clone(), s), &mut r).unwrap();
        let q = b.chain().rescale_prime(cx.level()) as f64;
        let p = b.mul_plain(&cx, &PlainVec::broadcast(-1.5, q)).unwrap();
        assert!(scales_match(p.scale(), s));
        let p = b.add_plain(&p, &PlainVec::broadcast(0.25, p.scale())).unwrap();
        let got = b.decrypt(&k.secret, &p).unwrap();
        let want: Vec<f64> = x.iter().map(|v| -1.5 * v + 0.25).collect();
        assert!(max_err(&want, got.values()) < 1e-5);
    }

    #[test]
    fn depth_exhaustion() {
        let (b, k) = backend(1 << 10, 130);
        let mut r = rng::stream(4, "t", 0);
        let c = b.encrypt(&k.public, &PlainVec::broadcast(0.5, 2f64.powi(30)), &mut r).unwrap();
        let mut acc = c.clone();
        for _ in 0..b.max_level() {
            acc = b.mul(&k.eval, &acc, &acc).unwrap();
        }
        assert!(matches!(b.mul(&k.eval, &acc, &acc), Err(Error::DepthExhausted)));
    }

    #[test]
    fn wrong_key_is_rejected() {
        let b = CkksBackend::new(derive_params(1 << 10, 200, 30, 1).unwrap()).unwrap();
        let k1 = b.keygen().unwrap();
        let b2 = CkksBackend::new(derive_params(1 << 10, 200, 30, 2).unwrap()).unwrap();
        let k2 = b2.keygen().unwrap();
        let mut r = rng::stream(5, "t", 0);
        let c = b.encrypt(&k1.public, &PlainVec::broadcast(0.5, 2f64.powi(30)), &mut r).unwrap();
        assert!(matches!(b.decrypt(&k2.secret, &c), Err(Error::KeyMismatch { .. })));
    }

    #[test]
    fn serialization_roundtrip() {
        let (b, k) = backend(1 << 10, 200);
        let mut r = rng::stream(6, "t", 0);
        let c = b.encrypt(&k.public, &PlainVec::broadcast(0.75, 2f64.powi(30)), &mut r).unwrap();
        let mut buf = Vec::new();
        b.write_ciphertext(&c, &mut buf).unwrap();
        let back = b.read_ciphertext(&mut buf.as_slice()).unwrap();
        assert_eq!(back.c0, c.c0);
        assert_eq!(back.c1, c.c1);

        let mut buf = Vec::new();
        b.write_secret_key(&k.secret, &mut buf).unwrap();
        let sk = b.read_secret_key(&mut buf.as_slice()).unwrap();
        assert_eq!(sk.s, k.secret.s);

        let other = CkksBackend::new(derive_params(1 << 10, 210, 30, 1).unwrap()).unwrap();
        let mut buf = Vec::new();
        b.write_ciphertext(&c, &mut buf).unwrap();
        assert!(matches!(
            other.read_ciphertext(&mut buf.as_slice()),
            Err(Error::FingerprintMismatch { .. })
        ));
    }

    #[test]
    fn exhausted_noise_budget_is_reported() {
        // A tiny scale leaves no room above the fresh noise.
        let (b, k) = backend(1 << 10, 200);
        let mut r = rng::stream(7, "t", 0);
        let c = b.encrypt(&k.public, &PlainVec::broadcast(0.5, 64.0), &mut r).unwrap();
        assert!(matches!(b.decrypt(&k.secret, &c), Err(Error::NoiseBudgetExceeded { .. })));
    }
}
