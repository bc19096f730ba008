//! Symmetric positive definite band matrices.

/// Lower band of a symmetric `n x n` matrix with half-bandwidth `kd`.
/// Entry `(i, j)` with `i - kd <= j <= i` lives at `i * (kd + 1) + (i - j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    pub n: usize,
    pub kd: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kd: usize) -> Self {
        BandMatrix {
            n,
            kd,
            data: vec![0.0; n * (kd + 1)],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.kd);
        i * (self.kd + 1) + (i - j)
    }

    /// Entry `(i, j)` of the symmetric matrix; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.kd {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entry `(i, j)` for `i >= j`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.data[i * (self.kd + 1)]).collect()
    }

    pub fn add_diagonal(&mut self, v: f64) {
        for i in 0..self.n {
            self.data[i * (self.kd + 1)] += v;
        }
    }

    /// In-place Cholesky factor `L` with `A = L L^T`. Returns `None` if a
    /// pivot is not positive.
    pub fn cholesky(&self) -> Option<BandCholesky> {
        let (n, kd) = (self.n, self.kd);
        let w = kd + 1;
        let mut l = self.data.clone();
        for j in 0..n {
            let lo = j.saturating_sub(kd);
            let mut s = l[j * w];
            for k in lo..j {
                let v = l[j * w + (j - k)];
                s -= v * v;
            }
            if !(s > 0.0) || !s.is_finite() {
                return None;
            }
            let d = s.sqrt();
            l[j * w] = d;
            for i in j + 1..(j + kd + 1).min(n) {
                let lo = i.saturating_sub(kd);
                let mut s = l[i * w + (i - j)];
                for k in lo..j {
                    s -= l[i * w + (i - k)] * l[j * w + (j - k)];
                }
                l[i * w + (i - j)] = s / d;
            }
        }
        Some(BandCholesky { n, kd, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    kd: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kd, w) = (self.n, self.kd, self.kd + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(kd);
            let mut s = y[i];
            for k in lo..i {
                s -= self.l[i * w + (i - k)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + kd + 1).min(n) {
                s -= self.l[k * w + (k - i)] * y[k];
            }
            y[i] = s / self.l[i * w];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, kd) in [(1, 0), (5, 1), (20, 4), (33, 32), (40, 7)] {
            let mut band = BandMatrix::zeros(n, kd);
            let mut dense = DMatrix::<f64>::zeros(n, n);
            // B^T B with banded B is banded and positive definite
            let b = DMatrix::<f64>::from_fn(n, n, |i, j| {
                if j >= i && j - i <= kd / 2 {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            let a = b.transpose() * &b + DMatrix::identity(n, n) * 0.1;
            for i in 0..n {
                for j in 0..=i {
                    if i - j <= kd {
                        band.add_lower(i, j, a[(i, j)]);
                    }
                    dense[(i, j)] = a[(i, j)];
                    dense[(j, i)] = a[(i, j)];
                }
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = band.cholesky().unwrap().solve(&rhs);
            let xd = dense.cholesky().unwrap().solve(&DVector::from_vec(rhs.clone()));
            for i in 0..n {
                assert!((x[i] - xd[i]).abs() < 1e-9 * (1.0 + xd[i].abs()));
            }
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut m = BandMatrix::zeros(2, 1);
        m.add_lower(0, 0, 1.0);
        m.add_lower(1, 0, 2.0);
        m.add_lower(1, 1, 1.0);
        assert!(m.cholesky().is_none());
    }
}
