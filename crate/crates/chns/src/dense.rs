//! Small dense linear algebra: LU with partial pivoting.
//!
//! Backs the `DirectDense` solver option and the dense-assembly oracles in
//! the test suites. Sizes stay at desk scale (a few hundred unknowns), so a
//! plain O(n^3) factorization is all that is needed.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone)]
pub struct DenseMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    /// Assemble a matrix column-by-column from a linear operator.
    pub fn from_operator(n: usize, mut apply: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let mut m = Self::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = apply(&e);
            for i in 0..n {
                m.set(i, j, col[i]);
            }
            e[j] = 0.0;
        }
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[i] = acc;
        }
        y
    }

    /// LU factorization with partial pivoting, in place.
    pub fn lu(mut self) -> Result<LuFactors> {
        let n = self.n;
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut max = self.at(k, k).abs();
            for i in (k + 1)..n {
                let v = self.at(i, k).abs();
                if v > max {
                    max = v;
                    p = i;
                }
            }
            if max == 0.0 {
                return Err(Error::Solver {
                    what: "dense LU (singular matrix)",
                    residual: 0.0,
                    iterations: k,
                });
            }
            if p != k {
                piv.swap(p, k);
                for j in 0..n {
                    let a = self.at(k, j);
                    let b = self.at(p, j);
                    self.set(k, j, b);
                    self.set(p, j, a);
                }
            }
            let pivot = self.at(k, k);
            for i in (k + 1)..n {
                let l = self.at(i, k) / pivot;
                self.set(i, k, l);
                for j in (k + 1)..n {
                    let v = self.at(i, j) - l * self.at(k, j);
                    self.set(i, j, v);
                }
            }
        }
        Ok(LuFactors { lu: self, piv })
    }
}

pub struct LuFactors {
    lu: DenseMatrix,
    piv: Vec<usize>,
}

impl LuFactors {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 1..n {
            let mut acc = x[i];
            for j in 0..i {
                acc -= self.lu.at(i, j) * x[j];
            }
            x[i] = acc;
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..n {
                acc -= self.lu.at(i, j) * x[j];
            }
            x[i] = acc / self.lu.at(i, i);
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn lu_solves_random_systems() {
        let mut rng = SplitMix64::new(5);
        for n in [1, 2, 5, 20] {
            let mut m = DenseMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    m.set(i, j, rng.next_symm());
                }
                // diagonal dominance keeps the test well-conditioned
                let v = m.at(i, i) + 4.0;
                m.set(i, i, v);
            }
            let x_true: Vec<f64> = (0..n).map(|_| rng.next_symm()).collect();
            let b = m.matvec(&x_true);
            let x = m.clone().lu().unwrap().solve(&b);
            for (a, b) in x.iter().zip(x_true.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = DenseMatrix::zeros(3);
        assert!(m.lu().is_err());
    }
}
