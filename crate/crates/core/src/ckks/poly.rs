//! Polynomials in RNS form: one residue vector of length N per prime.

/// Residues are stored contiguously; residue `i` occupies `data[i*n..(i+1)*n]`.
/// Which prime a residue belongs to is decided by the owner (see `Basis`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RnsPoly {
    n: usize,
    data: Vec<u64>,
}

impl RnsPoly {
    pub fn zero(n: usize, residues: usize) -> Self {
        Self {
            n,
            data: vec![0; n * residues],
        }
    }

    pub fn from_data(n: usize, data: Vec<u64>) -> Self {
        assert_eq!(data.len() % n, 0);
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn residues(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn residue(&self, i: usize) -> &[u64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn residue_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    /// Keeps only the first `k` residues (modulus drop).
    pub fn truncate(&mut self, k: usize) {
        self.data.truncate(k * self.n);
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            n: self.n,
            data: self.data[..k * self.n].to_vec(),
        }
    }

    pub fn push_residue(&mut self, r: &[u64]) {
        assert_eq!(r.len(), self.n);
        self.data.extend_from_slice(r);
    }

    pub fn byte_size(&self) -> usize {
        self.data.len() * 8
    }
}
