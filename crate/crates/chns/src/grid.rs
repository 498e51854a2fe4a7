//! Structured rectangular grids with cell-centered scalars and MAC-staggered
//! velocities.
//!
//! Scalars (phi, mu, sigma, p) live at cell centers and carry a homogeneous
//! Neumann closure (ghost = mirror of the first interior cell). Velocity
//! components live on the faces normal to their axis, so the component along
//! axis `a` has `n_a + 1` entries in that direction; the outermost faces sit
//! on the boundary and are pinned to zero under no-slip.
//!
//! Storage is row-major with index order (y, x) in 2D and (z, y, x) in 3D:
//! `idx = (iz * ny + iy) * nx + ix`.

use crate::error::{Error, Result};

/// Uniform rectangular grid, 2D or 3D.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dims: [usize; 3],
    lengths: [f64; 3],
    spacing: [f64; 3],
    dim: usize,
}

impl Grid {
    /// Build a grid from per-axis cell counts and box lengths.
    ///
    /// Each active axis needs at least 4 cells so the stencils have interior
    /// cells to work with.
    pub fn new(dims: &[usize], lengths: &[f64]) -> Result<Self> {
        let dim = dims.len();
        if dim != 2 && dim != 3 {
            return Err(Error::Grid(format!("dimension must be 2 or 3, got {dim}")));
        }
        if lengths.len() != dim {
            return Err(Error::Grid("dims and lengths disagree in length".into()));
        }
        let mut d = [1usize; 3];
        let mut l = [1.0f64; 3];
        let mut h = [1.0f64; 3];
        for a in 0..dim {
            if dims[a] < 4 {
                return Err(Error::Grid(format!(
                    "grid too small: axis {a} has {} cells, need at least 4",
                    dims[a]
                )));
            }
            if !(lengths[a] > 0.0) || !lengths[a].is_finite() {
                return Err(Error::Grid(format!(
                    "axis {a} length must be positive and finite, got {}",
                    lengths[a]
                )));
            }
            d[a] = dims[a];
            l[a] = lengths[a];
            h[a] = lengths[a] / dims[a] as f64;
        }
        Ok(Self {
            dims: d,
            lengths: l,
            spacing: h,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cell counts; inactive axes report 1.
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn lengths(&self) -> [f64; 3] {
        self.lengths
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn n_cells(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Volume of one cell (product of spacings over active axes).
    pub fn cell_volume(&self) -> f64 {
        let mut v = 1.0;
        for a in 0..self.dim {
            v *= self.spacing[a];
        }
        v
    }

    /// Total domain volume.
    pub fn volume(&self) -> f64 {
        let mut v = 1.0;
        for a in 0..self.dim {
            v *= self.lengths[a];
        }
        v
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.dims[0] && iy < self.dims[1] && iz < self.dims[2]);
        (iz * self.dims[1] + iy) * self.dims[0] + ix
    }

    /// Coordinate of the cell center along axis `a` at index `i`.
    #[inline]
    pub fn center(&self, a: usize, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing[a]
    }

    /// Number of faces of the axis-`a` velocity component (n_a + 1 along `a`).
    pub fn face_dims(&self, a: usize) -> [usize; 3] {
        let mut d = self.dims;
        d[a] += 1;
        d
    }

    pub fn n_faces(&self, a: usize) -> usize {
        let d = self.face_dims(a);
        d[0] * d[1] * d[2]
    }

    #[inline]
    pub fn face_idx(&self, a: usize, ix: usize, iy: usize, iz: usize) -> usize {
        let d = self.face_dims(a);
        debug_assert!(ix < d[0] && iy < d[1] && iz < d[2]);
        (iz * d[1] + iy) * d[0] + ix
    }
}

/// Kahan-Neumaier compensated sum; keeps grid integrals at rounding-level
/// accuracy so the exact discrete conservation laws are measurable.
pub fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Boundary condition tag for cell-centered scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarBc {
    /// Homogeneous Neumann: ghost cell mirrors the first interior cell.
    NeumannZero,
}

/// Cell-centered scalar field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub bc: ScalarBc,
}

impl ScalarField {
    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.n_cells()],
            bc: ScalarBc::NeumannZero,
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Sample a function of the cell-center coordinates (x, y, z).
    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64, f64) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut values = Vec::with_capacity(grid.n_cells());
        for iz in 0..nz {
            let z = grid.center(2, iz);
            for iy in 0..ny {
                let y = grid.center(1, iy);
                for ix in 0..nx {
                    values.push(f(grid.center(0, ix), y, z));
                }
            }
        }
        Self {
            grid,
            values,
            bc: ScalarBc::NeumannZero,
        }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.grid.idx(ix, iy, iz)]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Cell-volume-weighted integral over the domain.
    pub fn integrate(&self) -> f64 {
        compensated_sum(self.values.iter().copied()) * self.grid.cell_volume()
    }

    pub fn mean(&self) -> f64 {
        self.integrate() / self.grid.volume()
    }

    /// L2 norm with the cell-volume weight.
    pub fn norm_l2(&self) -> f64 {
        (compensated_sum(self.values.iter().map(|v| v * v)) * self.grid.cell_volume()).sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// L2 inner product (f, g) with the cell-volume weight.
    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        compensated_sum(
            self.values
                .iter()
                .zip(other.values.iter())
                .map(|(a, b)| a * b),
        ) * self.grid.cell_volume()
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn shift(&mut self, c: f64) {
        for v in &mut self.values {
            *v += c;
        }
    }

    /// Subtract the current mean, then add `target`; afterwards
    /// `self.mean() == target` to rounding.
    pub fn set_mean(&mut self, target: f64) {
        let m = self.mean();
        self.shift(target - m);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
            bc: self.bc,
        }
    }
}

/// Boundary condition tag for MAC velocity fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorBc {
    /// Velocity vanishes on the boundary; normal boundary faces are exactly 0.
    NoSlip,
}

/// Face-centered (MAC) velocity field.
///
/// `components[a]` holds the axis-`a` velocity at faces normal to axis `a`,
/// including the two boundary faces, which are kept at exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub components: Vec<Vec<f64>>,
    pub bc: VectorBc,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        let components = (0..grid.dim())
            .map(|a| vec![0.0; grid.n_faces(a)])
            .collect();
        Self {
            grid,
            components,
            bc: VectorBc::NoSlip,
        }
    }

    #[inline]
    pub fn comp(&self, a: usize) -> &[f64] {
        &self.components[a]
    }

    #[inline]
    pub fn comp_mut(&mut self, a: usize) -> &mut [f64] {
        &mut self.components[a]
    }

    /// Zero the boundary-normal faces, restoring the no-slip invariant after
    /// arbitrary writes into the component arrays.
    pub fn enforce_noslip(&mut self) {
        let grid = self.grid;
        for a in 0..grid.dim() {
            let d = grid.face_dims(a);
            let comp = &mut self.components[a];
            for iz in 0..d[2] {
                for iy in 0..d[1] {
                    for ix in 0..d[0] {
                        let on_boundary = match a {
                            0 => ix == 0 || ix == d[0] - 1,
                            1 => iy == 0 || iy == d[1] - 1,
                            _ => iz == 0 || iz == d[2] - 1,
                        };
                        if on_boundary {
                            comp[(iz * d[1] + iy) * d[0] + ix] = 0.0;
                        }
                    }
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components
            .iter()
            .all(|c| c.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.components
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// L2 norm over all faces with the uniform cell-volume weight.
    pub fn norm_l2(&self) -> f64 {
        let vol = self.grid.cell_volume();
        let sq = compensated_sum(self.components.iter().flat_map(|c| c.iter().map(|v| v * v)));
        (sq * vol).sqrt()
    }

    /// Face-weighted inner product (u, w).
    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.grid, other.grid);
        let vol = self.grid.cell_volume();
        let mut total = 0.0;
        for a in 0..self.grid.dim() {
            total += compensated_sum(
                self.components[a]
                    .iter()
                    .zip(other.components[a].iter())
                    .map(|(x, y)| x * y),
            );
        }
        total * vol
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        debug_assert_eq!(self.grid, other.grid);
        for a in 0..self.grid.dim() {
            for (x, y) in self.components[a]
                .iter_mut()
                .zip(other.components[a].iter())
            {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for c in &mut self.components {
            for v in c.iter_mut() {
                *v *= s;
            }
        }
    }
}

/// Model coefficients of the coupled system.
#[derive(Debug, Clone, Copy)]
pub struct PhysParams {
    /// Viscosity of the phi = +1 fluid.
    pub nu1: f64,
    /// Viscosity of the phi = -1 fluid.
    pub nu2: f64,
    /// Chemotaxis / active-transport coupling.
    pub chi: f64,
    /// Mass-reaction rate toward the target mean.
    pub alpha: f64,
    /// Nonlocal Oono interaction strength.
    pub beta: f64,
    /// Target mean of phi, in (-1, 1).
    pub c0: f64,
    /// Logarithmic potential temperature, 0 < theta < theta0.
    pub theta: f64,
    /// Critical temperature of the potential.
    pub theta0: f64,
    /// Viscous Cahn-Hilliard regularization coefficient.
    pub gamma: f64,
}

impl PhysParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu1 > 0.0 && self.nu2 > 0.0) {
            return Err(Error::Grid(format!(
                "viscosities must be positive, got nu1 = {}, nu2 = {}",
                self.nu1, self.nu2
            )));
        }
        if !(self.theta > 0.0 && self.theta < self.theta0) {
            return Err(Error::Grid(format!(
                "requires 0 < theta < theta0, got theta = {}, theta0 = {}",
                self.theta, self.theta0
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Grid(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Grid(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.c0 > -1.0 && self.c0 < 1.0) {
            return Err(Error::Grid(format!(
                "c0 must lie in (-1, 1), got {}",
                self.c0
            )));
        }
        Ok(())
    }
}

impl Default for PhysParams {
    fn default() -> Self {
        Self {
            nu1: 1.0,
            nu2: 1.0,
            chi: 0.0,
            alpha: 0.0,
            beta: 0.0,
            c0: 0.0,
            theta: 1.0,
            theta0: 2.0,
            gamma: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn grid_spacing_and_volume() {
        let g = Grid::new(&[64, 64], &[1.0, 1.0]).unwrap();
        assert_eq!(g.spacing()[0], 1.0 / 64.0);
        assert_eq!(g.spacing()[1], 1.0 / 64.0);
        assert!((g.volume() - 1.0).abs() < 1e-15);

        let g = Grid::new(&[16, 32], &[2.0, 1.0]).unwrap();
        assert!((g.spacing()[0] - 1.0 / 8.0).abs() < 1e-15);
        assert!((g.spacing()[1] - 1.0 / 32.0).abs() < 1e-15);
        assert!((g.volume() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(Grid::new(&[3, 8], &[1.0, 1.0]).is_err());
        assert!(Grid::new(&[8, 8], &[0.0, 1.0]).is_err());
        assert!(Grid::new(&[8, 8], &[-1.0, 1.0]).is_err());
        assert!(Grid::new(&[8], &[1.0]).is_err());
    }

    #[test]
    fn integrate_constants() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        assert!((ScalarField::constant(g, 1.0).integrate() - 1.0).abs() < 1e-15);
        assert_eq!(ScalarField::constant(g, 0.0).integrate(), 0.0);
        let g3 = Grid::new(&[4, 4, 4], &[2.0, 1.0, 1.0]).unwrap();
        assert!((ScalarField::constant(g3, 3.0).integrate() - 6.0).abs() < 1e-13);
    }

    #[test]
    fn integrate_matches_double_loop_oracle() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let mut rng = SplitMix64::new(7);
        let f = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
        // independent plain double-loop summation
        let mut acc = 0.0;
        for iy in 0..8 {
            for ix in 0..8 {
                acc += f.at(ix, iy, 0);
            }
        }
        acc *= g.cell_volume();
        let rel = (f.integrate() - acc).abs() / acc.abs().max(1e-300);
        assert!(rel < 1e-14, "rel = {rel:e}");
    }

    #[test]
    fn mean_of_cosine_vanishes() {
        let g = Grid::new(&[64, 16], &[1.0, 1.0]).unwrap();
        let f = ScalarField::from_fn(g, |x, _, _| (2.0 * std::f64::consts::PI * x).cos());
        assert!(f.mean().abs() < 1e-13, "mean = {:e}", f.mean());
    }

    #[test]
    fn mean_perturbation_is_linear() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let mut f = ScalarField::constant(g, 0.25);
        let m0 = f.mean();
        let delta = 0.37;
        f.values[13] += delta;
        let n = g.n_cells() as f64;
        assert!((f.mean() - (m0 + delta / n)).abs() < 1e-14);
    }

    #[test]
    fn integrate_is_linear() {
        let g = Grid::new(&[16, 8], &[1.5, 0.5]).unwrap();
        let mut rng = SplitMix64::new(11);
        for _ in 0..20 {
            let f = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
            let gfield = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
            let a = rng.next_symm();
            let b = rng.next_symm();
            let mut combo = f.clone();
            combo.scale(a);
            combo.add_scaled(&gfield, b);
            let lhs = combo.integrate();
            let rhs = a * f.integrate() + b * gfield.integrate();
            let scale = lhs.abs().max(rhs.abs()).max(1e-12);
            assert!((lhs - rhs).abs() / scale < 1e-13);
        }
    }

    #[test]
    fn noslip_boundary_faces_stay_zero() {
        let g = Grid::new(&[6, 5], &[1.0, 1.0]).unwrap();
        let mut v = VectorField::zeros(g);
        for a in 0..2 {
            for val in v.comp_mut(a).iter_mut() {
                *val = 1.0;
            }
        }
        v.enforce_noslip();
        let d0 = g.face_dims(0);
        for iy in 0..d0[1] {
            assert_eq!(v.comp(0)[(iy * d0[0])], 0.0);
            assert_eq!(v.comp(0)[(iy * d0[0]) + d0[0] - 1], 0.0);
        }
        let d1 = g.face_dims(1);
        for ix in 0..d1[0] {
            assert_eq!(v.comp(1)[ix], 0.0);
            assert_eq!(v.comp(1)[(d1[1] - 1) * d1[0] + ix], 0.0);
        }
        // interior untouched
        assert_eq!(v.comp(0)[g.face_idx(0, 2, 2, 0)], 1.0);
    }

    #[test]
    fn params_validation() {
        let mut p = PhysParams::default();
        assert!(p.validate().is_ok());
        p.theta = 3.0;
        assert!(p.validate().is_err());
        p.theta = 1.0;
        p.c0 = 1.5;
        assert!(p.validate().is_err());
    }
}
