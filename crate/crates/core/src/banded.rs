//! Banded LU without pivoting.
//!
//! Policy evaluation assembles rows `(lambda + sum_j w_j) u_i - sum_j w_j u_j = l_i`
//! together with clamp and oblique boundary rows: a diagonally dominant
//! M-matrix, for which elimination without pivoting is stable and keeps the
//! band intact. A vanishing pivot therefore signals a broken assembly and is
//! reported as a solver error rather than patched by permutation.

use crate::error::{Error, Result};

const PIVOT_TINY: f64 = 1e-300;

/// Square banded matrix with equal lower and upper bandwidth `bw`, stored as
/// `n` rows of `2 bw + 1` entries; entry `(i, j)` lives at `[i][bw + j - i]`.
pub struct BandedMatrix {
    pub n: usize,
    pub bw: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn new(n: usize, bw: usize) -> Self {
        BandedMatrix { n, bw, data: vec![0.0; n * (2 * bw + 1)] }
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(j + self.bw >= i && j <= i + self.bw, "entry ({i},{j}) outside band {}", self.bw);
        i * (2 * self.bw + 1) + (self.bw + j) - i
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.offset(i, j);
        self.data[k] += v;
    }

    #[cfg(test)]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.offset(i, j);
        self.data[k] = v;
    }

    /// In-place LU factorization. Fails on a (near-)zero pivot.
    pub fn factorize(mut self) -> Result<BandedLu> {
        let (n, bw) = (self.n, self.bw);
        let stride = 2 * bw + 1;
        for k in 0..n {
            let pivot = self.data[k * stride + bw];
            if pivot.abs() < PIVOT_TINY || !pivot.is_finite() {
                return Err(Error::Solver(format!(
                    "banded LU pivot {pivot:.3e} at row {k}: system is singular or badly assembled"
                )));
            }
            let i_end = (k + bw + 1).min(n);
            for i in (k + 1)..i_end {
                // A[i][k]
                let lik = self.data[i * stride + bw + k - i] / pivot;
                self.data[i * stride + bw + k - i] = lik;
                if lik != 0.0 {
                    let j_end = (k + bw + 1).min(n);
                    for j in (k + 1)..j_end {
                        let akj = self.data[k * stride + bw + j - k];
                        if akj != 0.0 {
                            self.data[i * stride + bw + j - i] -= lik * akj;
                        }
                    }
                }
            }
        }
        Ok(BandedLu { n, bw, data: self.data })
    }
}

/// Factored form; `solve` overwrites the right-hand side with the solution.
#[derive(Debug)]
pub struct BandedLu {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandedLu {
    pub fn solve(&self, rhs: &mut [f64]) {
        assert_eq!(rhs.len(), self.n);
        let (n, bw) = (self.n, self.bw);
        let stride = 2 * bw + 1;
        // Forward: L y = b, unit diagonal.
        for i in 0..n {
            let j_start = i.saturating_sub(bw);
            let mut acc = rhs[i];
            for j in j_start..i {
                acc -= self.data[i * stride + bw + j - i] * rhs[j];
            }
            rhs[i] = acc;
        }
        // Backward: U x = y.
        for i in (0..n).rev() {
            let j_end = (i + bw + 1).min(n);
            let mut acc = rhs[i];
            for j in (i + 1)..j_end {
                acc -= self.data[i * stride + bw + j - i] * rhs[j];
            }
            rhs[i] = acc / self.data[i * stride + bw];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tridiagonal_known_solution() {
        // [2 -1; -1 2 -1; -1 2] x = [1 0 1] has x = [1 1 1].
        let mut m = BandedMatrix::new(3, 1);
        for i in 0..3 {
            m.set(i, i, 2.0);
        }
        m.set(0, 1, -1.0);
        m.set(1, 0, -1.0);
        m.set(1, 2, -1.0);
        m.set(2, 1, -1.0);
        let lu = m.factorize().unwrap();
        let mut x = vec![1.0, 0.0, 1.0];
        lu.solve(&mut x);
        for v in x {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn wide_band_random_dominant_system() {
        // Deterministic diagonally dominant system with bandwidth 4; check
        // the residual of the computed solution.
        let n = 60;
        let bw = 4;
        let mut m = BandedMatrix::new(n, bw);
        let mut dense = vec![vec![0.0f64; n]; n];
        let mut state = 0x2545F4914F6CDD1Du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for i in 0..n {
            let mut off_sum = 0.0;
            for j in i.saturating_sub(bw)..(i + bw + 1).min(n) {
                if j == i {
                    continue;
                }
                let v = -next();
                m.set(i, j, v);
                dense[i][j] = v;
                off_sum += v.abs();
            }
            let d = off_sum + 1.0 + next();
            m.set(i, i, d);
            dense[i][i] = d;
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = b.clone();
        m.factorize().unwrap().solve(&mut x);
        for i in 0..n {
            let ri: f64 = (0..n).map(|j| dense[i][j] * x[j]).sum::<f64>() - b[i];
            assert!(ri.abs() < 1e-10, "residual {ri:.3e} at row {i}");
        }
    }

    #[test]
    fn singular_system_reports_zero_pivot() {
        let mut m = BandedMatrix::new(2, 1);
        m.set(0, 0, 1.0);
        m.set(0, 1, 1.0);
        m.set(1, 0, 1.0);
        m.set(1, 1, 1.0);
        let err = m.factorize().unwrap_err();
        assert!(matches!(err, Error::Solver(_)));
    }
}
