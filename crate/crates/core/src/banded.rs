//! Symmetric banded storage with an in-place Cholesky factorization.
//!
//! The free-node stiffness matrix of the rod couples each node with at most
//! two neighbours on either side, so a dense factorization wastes almost all
//! of its work.

#[derive(Clone, Debug)]
pub struct BandedSym {
    n: usize,
    bw: usize,
    // lower band, row-major: band[i * (bw + 1) + k] = A[i][i - k]
    band: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    /// Adds `v` to `A[i][j]` (and implicitly `A[j][i]`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = r - c;
        assert!(k <= self.bw, "entry ({i}, {j}) outside bandwidth {}", self.bw);
        self.band[r * (self.bw + 1) + k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = r - c;
        if k > self.bw {
            0.0
        } else {
            self.band[r * (self.bw + 1) + k]
        }
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.band[i * (self.bw + 1)] += v;
        }
    }

    pub fn max_diagonal(&self) -> f64 {
        (0..self.n)
            .map(|i| self.band[i * (self.bw + 1)])
            .fold(0.0, f64::max)
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for k in 0..=self.bw.min(i) {
                let j = i - k;
                let a = self.band[i * (self.bw + 1) + k];
                y[i] += a * x[j];
                if k > 0 {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    /// Cholesky factor `L` (same band) or `None` when the matrix is not
    /// numerically positive definite.
    pub fn cholesky(&self) -> Option<BandedCholesky> {
        let w = self.bw + 1;
        let mut l = self.band.clone();
        for i in 0..self.n {
            let j0 = i.saturating_sub(self.bw);
            for j in j0..=i {
                let mut s = l[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(self.bw));
                for k in k0..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    l[i * w] = s.sqrt();
                } else {
                    l[i * w + (i - j)] = s / l[j * w];
                }
            }
        }
        Some(BandedCholesky {
            n: self.n,
            bw: self.bw,
            l,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandedCholesky {
    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let w = self.bw + 1;
        for i in 0..self.n {
            let mut s = b[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l[i * w + (i - k)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
        for i in (0..self.n).rev() {
            let mut s = b[i];
            for k in (i + 1)..(i + w).min(self.n) {
                s -= self.l[k * w + (k - i)] * b[k];
            }
            b[i] = s / self.l[i * w];
        }
    }
}
