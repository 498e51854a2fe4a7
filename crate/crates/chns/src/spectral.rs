//! Direct solver for constant-coefficient Neumann problems on uniform
//! rectangular grids.
//!
//! The cell-centered Neumann Laplacian factorizes over the axes; each 1D
//! stencil is diagonalized by the cosine basis
//!
//! ```text
//! v_k(j) = cos(pi k (2j + 1) / (2n)),   -lap1d v_k = z_k v_k,
//! z_k = (4 / h^2) sin^2(pi k / (2n)),   k = 0 .. n-1,
//! ```
//!
//! so any polynomial `p(-lap)` is inverted exactly by transforming along each
//! axis with a dense n x n basis matrix (O(N * (nx + ny + nz)) work), scaling
//! the modes by `1 / p(z)`, and transforming back. No FFT is involved; at
//! desk scale the dense 1D transforms are plenty fast, and the solve is exact
//! to rounding, which keeps the discrete conservation identities sharp.

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};

struct AxisBasis {
    n: usize,
    /// Orthonormal basis, row k = k-th eigenvector sampled at cell centers.
    q: Vec<f64>,
    /// Eigenvalues of the 1D negative Neumann Laplacian.
    z: Vec<f64>,
}

impl AxisBasis {
    fn new(n: usize, h: f64) -> Self {
        let mut q = vec![0.0; n * n];
        let mut z = vec![0.0; n];
        let norm0 = (1.0 / n as f64).sqrt();
        let norm = (2.0 / n as f64).sqrt();
        for k in 0..n {
            let s = (std::f64::consts::PI * k as f64 / (2.0 * n as f64)).sin();
            z[k] = 4.0 / (h * h) * s * s;
            let c = if k == 0 { norm0 } else { norm };
            for j in 0..n {
                q[k * n + j] = c
                    * (std::f64::consts::PI * k as f64 * (2 * j + 1) as f64 / (2.0 * n as f64))
                        .cos();
            }
        }
        Self { n, q, z }
    }
}

/// Precomputed transform for one grid.
pub struct SpectralPlan {
    grid: Grid,
    axes: Vec<AxisBasis>,
}

/// Shared plan for a grid, built once per process.
pub fn plan_for(grid: &Grid) -> std::sync::Arc<SpectralPlan> {
    use std::collections::HashMap;
    use std::sync::{Arc, Mutex, OnceLock};
    type Key = ([usize; 3], [u64; 3]);
    static CACHE: OnceLock<Mutex<HashMap<Key, Arc<SpectralPlan>>>> = OnceLock::new();
    let key = (
        grid.dims(),
        [
            grid.lengths()[0].to_bits(),
            grid.lengths()[1].to_bits(),
            grid.lengths()[2].to_bits(),
        ],
    );
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    guard
        .entry(key)
        .or_insert_with(|| Arc::new(SpectralPlan::new(grid)))
        .clone()
}

impl SpectralPlan {
    pub fn new(grid: &Grid) -> Self {
        let axes = (0..grid.dim())
            .map(|a| AxisBasis::new(grid.dims()[a], grid.spacing()[a]))
            .collect();
        Self { grid: *grid, axes }
    }

    /// Apply the basis matrix (or its transpose) along one axis of the cube.
    fn transform_axis(&self, values: &mut Vec<f64>, axis: usize, forward: bool) {
        let [nx, ny, nz] = self.grid.dims();
        let basis = &self.axes[axis];
        let n = basis.n;
        let mut line = vec![0.0; n];
        let mut out_line = vec![0.0; n];
        let (stride, n_lines_outer, n_lines_inner, outer_stride, inner_stride) = match axis {
            0 => (1, nz * ny, 1, nx, 0),
            1 => (nx, nz, nx, nx * ny, 1),
            _ => (nx * ny, 1, nx * ny, 0, 1),
        };
        for lo in 0..n_lines_outer {
            for li in 0..n_lines_inner {
                let base = lo * outer_stride + li * inner_stride;
                for j in 0..n {
                    line[j] = values[base + j * stride];
                }
                for k in 0..n {
                    let mut acc = 0.0;
                    if forward {
                        let row = &basis.q[k * n..(k + 1) * n];
                        for j in 0..n {
                            acc += row[j] * line[j];
                        }
                    } else {
                        for j in 0..n {
                            acc += basis.q[j * n + k] * line[j];
                        }
                    }
                    out_line[k] = acc;
                }
                for k in 0..n {
                    values[base + k * stride] = out_line[k];
                }
            }
        }
    }

    fn forward(&self, f: &ScalarField) -> Vec<f64> {
        let mut v = f.values.clone();
        for a in 0..self.grid.dim() {
            self.transform_axis(&mut v, a, true);
        }
        v
    }

    fn inverse(&self, mut v: Vec<f64>) -> Vec<f64> {
        for a in 0..self.grid.dim() {
            self.transform_axis(&mut v, a, false);
        }
        v
    }

    /// Combined eigenvalue of the negative Laplacian for the mode at `idx`.
    fn mode_z(&self, idx: usize) -> f64 {
        let [nx, ny, _] = self.grid.dims();
        let kx = idx % nx;
        let ky = (idx / nx) % ny;
        let kz = idx / (nx * ny);
        let mut z = self.axes[0].z[kx] + self.axes[1].z[ky];
        if self.grid.dim() == 3 {
            z += self.axes[2].z[kz];
        }
        z
    }

    /// Solve `(a I + b (-lap)) u = f` with Neumann BC; requires `a > 0`.
    pub fn solve_helmholtz(&self, f: &ScalarField, a: f64, b: f64) -> Result<ScalarField> {
        if !(a > 0.0) {
            return Err(Error::Solver {
                what: "helmholtz (nonpositive shift)",
                residual: a,
                iterations: 0,
            });
        }
        let mut coeff = self.forward(f);
        for (i, c) in coeff.iter_mut().enumerate() {
            *c /= a + b * self.mode_z(i);
        }
        Ok(ScalarField {
            grid: self.grid,
            values: self.inverse(coeff),
            bc: f.bc,
        })
    }

    /// Solve `-lap u = f` with Neumann BC for zero-mean `f`, returning the
    /// zero-mean solution. The constant mode of `f` is discarded.
    pub fn solve_poisson_zero_mean(&self, f: &ScalarField) -> ScalarField {
        let mut coeff = self.forward(f);
        coeff[0] = 0.0;
        for i in 1..coeff.len() {
            coeff[i] /= self.mode_z(i);
        }
        ScalarField {
            grid: self.grid,
            values: self.inverse(coeff),
            bc: f.bc,
        }
    }

    /// Solve `(c0 I + c1 (-lap) + c2 (-lap)^2) u = f` on the zero-mean
    /// subspace; the constant mode of `f` is discarded and `mean(u) = 0`.
    pub fn solve_poly2_zero_mean(&self, f: &ScalarField, c0: f64, c1: f64, c2: f64) -> ScalarField {
        let mut coeff = self.forward(f);
        coeff[0] = 0.0;
        for i in 1..coeff.len() {
            let z = self.mode_z(i);
            coeff[i] /= c0 + c1 * z + c2 * z * z;
        }
        ScalarField {
            grid: self.grid,
            values: self.inverse(coeff),
            bc: f.bc,
        }
    }
}
