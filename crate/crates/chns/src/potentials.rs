//! Bulk free-energy densities and the regularization procedures for initial
//! data.
//!
//! The logarithmic (Flory-Huggins) potential is
//!
//! ```text
//! Psi(r) = theta/2 [(1-r) ln(1-r) + (1+r) ln(1+r)] + theta0/2 (1 - r^2)
//! ```
//!
//! with 0 < theta < theta0, singular at r = +-1. It splits as
//! `Psi = Psi0 - theta0/2 r^2` with `Psi0'' >= theta > 0`. The quartic
//! approximation is `Psi(r) = (1 - r^2)^2 / 4`.

use crate::error::{Error, Result};
use crate::grid::ScalarField;
use crate::operators::{self, LinearSolveConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    FloryHuggins,
    Quartic,
}

/// Bulk potential with its evaluation guard.
///
/// Flory-Huggins evaluations clamp the argument to
/// `[-1 + clip_delta, 1 - clip_delta]`; every clamp is reported back to the
/// caller through the field-level helpers so that separation claims stay
/// falsifiable.
#[derive(Debug, Clone, Copy)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub theta: f64,
    pub theta0: f64,
    pub clip_delta: f64,
}

impl PotentialSpec {
    pub fn flory_huggins(theta: f64, theta0: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < theta0) {
            return Err(Error::Grid(format!(
                "Flory-Huggins requires 0 < theta < theta0, got theta = {theta}, theta0 = {theta0}"
            )));
        }
        Ok(Self {
            kind: PotentialKind::FloryHuggins,
            theta,
            theta0,
            clip_delta: 1e-9,
        })
    }

    pub fn quartic() -> Self {
        Self {
            kind: PotentialKind::Quartic,
            theta: 1.0,
            theta0: 2.0,
            clip_delta: 1e-9,
        }
    }

    pub fn is_singular(&self) -> bool {
        self.kind == PotentialKind::FloryHuggins
    }

    /// Clamp into the admissible open interval; the flag reports whether the
    /// guard was hit.
    #[inline]
    fn clip(&self, r: f64) -> (f64, bool) {
        match self.kind {
            PotentialKind::Quartic => (r, false),
            PotentialKind::FloryHuggins => {
                let lim = 1.0 - self.clip_delta;
                if r > lim {
                    (lim, true)
                } else if r < -lim {
                    (-lim, true)
                } else {
                    (r, false)
                }
            }
        }
    }

    pub fn psi(&self, r: f64) -> Result<f64> {
        if r.is_nan() {
            return Err(Error::NonFinite("potential argument"));
        }
        Ok(self.psi_unchecked(r).0)
    }

    pub fn psi_prime(&self, r: f64) -> Result<f64> {
        if r.is_nan() {
            return Err(Error::NonFinite("potential argument"));
        }
        Ok(self.psi_prime_unchecked(r).0)
    }

    pub fn psi_double_prime(&self, r: f64) -> Result<f64> {
        if r.is_nan() {
            return Err(Error::NonFinite("potential argument"));
        }
        Ok(self.psi_double_prime_unchecked(r).0)
    }

    #[inline]
    pub(crate) fn psi_unchecked(&self, r: f64) -> (f64, bool) {
        match self.kind {
            PotentialKind::Quartic => {
                let s = 1.0 - r * r;
                (0.25 * s * s, false)
            }
            PotentialKind::FloryHuggins => {
                let (r, clipped) = self.clip(r);
                let v =
                    0.5 * self.theta * ((1.0 - r) * (1.0 - r).ln() + (1.0 + r) * (1.0 + r).ln())
                        + 0.5 * self.theta0 * (1.0 - r * r);
                (v, clipped)
            }
        }
    }

    #[inline]
    pub(crate) fn psi_prime_unchecked(&self, r: f64) -> (f64, bool) {
        match self.kind {
            PotentialKind::Quartic => (r * r * r - r, false),
            PotentialKind::FloryHuggins => {
                let (r, clipped) = self.clip(r);
                let v = 0.5 * self.theta * ((1.0 + r) / (1.0 - r)).ln() - self.theta0 * r;
                (v, clipped)
            }
        }
    }

    #[inline]
    pub(crate) fn psi_double_prime_unchecked(&self, r: f64) -> (f64, bool) {
        match self.kind {
            PotentialKind::Quartic => (3.0 * r * r - 1.0, false),
            PotentialKind::FloryHuggins => {
                let (r, clipped) = self.clip(r);
                (self.theta / (1.0 - r * r) - self.theta0, clipped)
            }
        }
    }

    /// Derivative of the convex part `Psi0` (Flory-Huggins only).
    pub fn psi0_prime(&self, r: f64) -> Result<f64> {
        match self.kind {
            PotentialKind::FloryHuggins => {
                if r.is_nan() {
                    return Err(Error::NonFinite("potential argument"));
                }
                let (r, _) = self.clip(r);
                Ok(0.5 * self.theta * ((1.0 + r) / (1.0 - r)).ln())
            }
            PotentialKind::Quartic => Err(Error::Grid(
                "Psi0 split is only defined for the Flory-Huggins potential".into(),
            )),
        }
    }

    fn psi0_double_prime(&self, r: f64) -> f64 {
        let (r, _) = self.clip(r);
        self.theta / (1.0 - r * r)
    }

    /// Evaluate Psi over a field; returns the values and the clip count.
    pub fn psi_field(&self, f: &ScalarField) -> Result<(ScalarField, usize)> {
        self.apply_field(f, |s, r| s.psi_unchecked(r))
    }

    /// Evaluate Psi' over a field; returns the values and the clip count.
    pub fn psi_prime_field(&self, f: &ScalarField) -> Result<(ScalarField, usize)> {
        self.apply_field(f, |s, r| s.psi_prime_unchecked(r))
    }

    fn apply_field(
        &self,
        f: &ScalarField,
        eval: impl Fn(&Self, f64) -> (f64, bool),
    ) -> Result<(ScalarField, usize)> {
        let mut out = ScalarField::zeros(f.grid);
        let mut clips = 0usize;
        for (o, &r) in out.values.iter_mut().zip(f.values.iter()) {
            if r.is_nan() {
                return Err(Error::NonFinite("potential argument"));
            }
            let (v, clipped) = eval(self, r);
            *o = v;
            if clipped {
                clips += 1;
            }
        }
        Ok((out, clips))
    }

    /// Count of cells at or beyond the clip guard, without evaluating.
    pub fn clip_events_in(&self, f: &ScalarField) -> usize {
        if !self.is_singular() {
            return 0;
        }
        let lim = 1.0 - self.clip_delta;
        f.values.iter().filter(|&&r| r.abs() > lim).count()
    }
}

/// Concentration-dependent viscosity, linear blend of the two fluids with the
/// clamp corners smoothed over width 0.05 so the extension stays C^1.
pub fn viscosity(nu1: f64, nu2: f64, r: f64) -> f64 {
    let c = smooth_clamp_unit(r, 0.05);
    nu1 * 0.5 * (1.0 + c) + nu2 * 0.5 * (1.0 - c)
}

/// Smooth clamp to [-1, 1]: identity on |r| <= 1 - w, constant outside
/// |r| >= 1 + w, quadratic blend in the corners.
fn smooth_clamp_unit(r: f64, w: f64) -> f64 {
    let a = r.abs();
    let s = r.signum();
    if a <= 1.0 - w {
        r
    } else if a >= 1.0 + w {
        s
    } else {
        let d = 1.0 + w - a;
        s * (1.0 - d * d / (4.0 * w))
    }
}

/// The cut-off function h_k: clamps r to [-k, k].
pub fn cutoff_hk(k: f64, r: f64) -> f64 {
    debug_assert!(k > 0.0);
    if r > k {
        k
    } else if r < -k {
        -k
    } else {
        r
    }
}

/// Regularize an initial phase field.
///
/// Computes `mu0 = -lap(phi0) + Psi0'(phi0)`, cuts it off with `h_k`, and
/// solves the nonlinear elliptic problem
///
/// ```text
/// -lap(phi) + Psi0'(phi) = h_k(mu0),   Neumann BC,
/// ```
///
/// by damped Newton iteration. The result satisfies
/// `max |Psi0'(phi)| <= k`, hence it is strictly separated from the pure
/// phases.
pub fn regularize_initial_phi(
    phi0: &ScalarField,
    k: f64,
    spec: &PotentialSpec,
    linear: &LinearSolveConfig,
) -> Result<ScalarField> {
    if !spec.is_singular() {
        return Err(Error::Grid(
            "initial-datum regularization requires the Flory-Huggins potential".into(),
        ));
    }
    if !(k > 0.0) {
        return Err(Error::Grid(format!(
            "cut-off level must be positive, got {k}"
        )));
    }
    if !phi0.is_finite() {
        return Err(Error::NonFinite("phi0"));
    }
    if phi0.norm_linf() > 1.0 {
        return Err(Error::Grid("regularization requires |phi0| <= 1".into()));
    }
    if phi0.mean().abs() >= 1.0 {
        return Err(Error::Grid(
            "regularization requires |mean(phi0)| < 1".into(),
        ));
    }

    // right-hand side: h_k(-lap(phi0) + Psi0'(phi0))
    let lap0 = operators::laplacian_neumann(phi0);
    let mut rhs = ScalarField::zeros(phi0.grid);
    for i in 0..rhs.values.len() {
        let mu = -lap0.values[i] + spec.psi0_prime(phi0.values[i])?;
        rhs.values[i] = cutoff_hk(k, mu);
    }

    newton_elliptic(phi0, &rhs, spec, linear)
}

/// Damped Newton for `-lap(phi) + Psi0'(phi) = rhs`.
///
/// Backtracking halving with an Armijo condition on the L2 residual norm;
/// trial iterates that leave (-1, 1) are rejected outright.
fn newton_elliptic(
    guess: &ScalarField,
    rhs: &ScalarField,
    spec: &PotentialSpec,
    linear: &LinearSolveConfig,
) -> Result<ScalarField> {
    const MAX_NEWTON: usize = 50;
    const TOL: f64 = 1e-10;
    const ARMIJO: f64 = 1e-4;

    // start strictly inside (-1, 1)
    let mut phi = guess.map(|r| r.clamp(-1.0 + 1e-6, 1.0 - 1e-6));

    let residual_of = |phi: &ScalarField| -> Result<ScalarField> {
        let lap = operators::laplacian_neumann(phi);
        let mut res = ScalarField::zeros(phi.grid);
        for i in 0..res.values.len() {
            res.values[i] = -lap.values[i] + spec.psi0_prime(phi.values[i])? - rhs.values[i];
        }
        Ok(res)
    };

    let mut res = residual_of(&phi)?;
    let mut rnorm = res.norm_l2();
    for _ in 0..MAX_NEWTON {
        if rnorm < TOL {
            return Ok(phi);
        }
        // Jacobian -lap + diag(Psi0''(phi)) is SPD since Psi0'' >= theta.
        let diag: Vec<f64> = phi
            .values
            .iter()
            .map(|&r| spec.psi0_double_prime(r))
            .collect();
        let mut neg_res = res.clone();
        neg_res.scale(-1.0);
        let delta = operators::cg_shifted_laplacian(&neg_res, &diag, linear)?;

        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut trial = phi.clone();
            trial.add_scaled(&delta, lambda);
            if trial.norm_linf() < 1.0 {
                let trial_res = residual_of(&trial)?;
                let trial_norm = trial_res.norm_l2();
                if trial_norm <= (1.0 - ARMIJO * lambda) * rnorm {
                    phi = trial;
                    res = trial_res;
                    rnorm = trial_norm;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NewtonDiverged {
                residual: rnorm,
                iterations: MAX_NEWTON,
            });
        }
    }
    if rnorm < TOL {
        Ok(phi)
    } else {
        Err(Error::NewtonDiverged {
            residual: rnorm,
            iterations: MAX_NEWTON,
        })
    }
}

/// Regularize an initial chemical density: solve
/// `-(1/k) lap(sigma) + sigma = sigma0` with Neumann BC.
///
/// The discrete equation integrates to `mean(sigma) = mean(sigma0)`, so the
/// mean is preserved exactly.
pub fn regularize_initial_sigma(sigma0: &ScalarField, k: f64) -> Result<ScalarField> {
    if !(k > 0.0) {
        return Err(Error::Grid(format!(
            "smoothing level must be positive, got {k}"
        )));
    }
    if !sigma0.is_finite() {
        return Err(Error::NonFinite("sigma0"));
    }
    let plan = crate::spectral::plan_for(&sigma0.grid);
    plan.solve_helmholtz(sigma0, 1.0, 1.0 / k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::rng::SplitMix64;

    fn fh(theta: f64, theta0: f64) -> PotentialSpec {
        PotentialSpec::flory_huggins(theta, theta0).unwrap()
    }

    #[test]
    fn flory_huggins_values() {
        let p = fh(1.0, 2.0);
        assert_eq!(p.psi_prime(0.0).unwrap(), 0.0);
        assert!((p.psi(0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((p.psi_double_prime(0.0).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn quartic_values() {
        let p = PotentialSpec::quartic();
        assert!((p.psi(1.0).unwrap() - 0.0).abs() < 1e-15);
        assert!((p.psi(0.0).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nan_rejected() {
        let p = PotentialSpec::quartic();
        assert!(p.psi(f64::NAN).is_err());
        assert!(fh(1.0, 2.0).psi_prime(f64::NAN).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-6;
        for p in [fh(1.0, 2.0), fh(0.5, 3.0), PotentialSpec::quartic()] {
            let mut r = -0.9;
            while r <= 0.9 {
                let fd1 = (p.psi(r + h).unwrap() - p.psi(r - h).unwrap()) / (2.0 * h);
                assert!(
                    (fd1 - p.psi_prime(r).unwrap()).abs() < 1e-6,
                    "psi' mismatch at r = {r}"
                );
                let fd2 = (p.psi_prime(r + h).unwrap() - p.psi_prime(r - h).unwrap()) / (2.0 * h);
                assert!(
                    (fd2 - p.psi_double_prime(r).unwrap()).abs() < 1e-6,
                    "psi'' mismatch at r = {r}"
                );
                r += 0.05;
            }
        }
    }

    #[test]
    fn convex_split_is_uniformly_convex() {
        let p = fh(0.7, 2.5);
        let lim = 1.0 - p.clip_delta;
        for i in 0..200 {
            let r = -lim + 2.0 * lim * (i as f64 + 0.5) / 200.0;
            let split = p.psi_double_prime(r).unwrap() + p.theta0;
            assert!(split >= p.theta - 1e-12, "Psi0''({r}) = {split}");
        }
    }

    #[test]
    fn clip_is_counted_not_nan() {
        let p = fh(1.0, 2.0);
        let v = p.psi_prime(1.5).unwrap();
        assert!(v.is_finite());
        let g = Grid::new(&[4, 4], &[1.0, 1.0]).unwrap();
        let mut f = ScalarField::constant(g, 0.0);
        f.values[0] = 1.0;
        f.values[1] = -2.0;
        let (_, clips) = p.psi_prime_field(&f).unwrap();
        assert_eq!(clips, 2);
        assert_eq!(p.clip_events_in(&f), 2);
    }

    #[test]
    fn viscosity_blend() {
        for r in [-2.0, -1.0, -0.3, 0.0, 0.5, 1.0, 3.0] {
            assert!((viscosity(1.0, 1.0, r) - 1.0).abs() < 1e-15);
        }
        assert!((viscosity(2.0, 1.0, 0.0) - 1.5).abs() < 1e-15);
        assert!((viscosity(2.0, 1.0, 3.0) - 2.0).abs() < 1e-15);
        // bounds hold everywhere, including the smoothed corners
        let mut r = -1.5;
        while r <= 1.5 {
            let nu = viscosity(2.0, 0.5, r);
            assert!((0.5..=2.0).contains(&nu));
            r += 0.01;
        }
    }

    #[test]
    fn viscosity_clamp_is_c1() {
        // difference quotient of the smooth clamp is continuous through the corners
        let h = 1e-7;
        for r0 in [0.94999, 0.95, 1.0, 1.05, 1.05001] {
            let d1 =
                (smooth_clamp_unit(r0 + h, 0.05) - smooth_clamp_unit(r0 - h, 0.05)) / (2.0 * h);
            let d2 =
                (smooth_clamp_unit(r0 + 2.0 * h, 0.05) - smooth_clamp_unit(r0, 0.05)) / (2.0 * h);
            assert!((d1 - d2).abs() < 1e-4, "kink near {r0}");
        }
    }

    #[test]
    fn cutoff_branches() {
        assert_eq!(cutoff_hk(3.0, 5.0), 3.0);
        assert_eq!(cutoff_hk(3.0, -5.0), -3.0);
        assert_eq!(cutoff_hk(3.0, 2.0), 2.0);
    }

    #[test]
    fn cutoff_is_lipschitz_and_odd() {
        let mut rng = SplitMix64::new(3);
        for _ in 0..500 {
            let k = 0.1 + 4.0 * rng.next_f64();
            let a = 10.0 * rng.next_symm();
            let b = 10.0 * rng.next_symm();
            assert!((cutoff_hk(k, a) - cutoff_hk(k, b)).abs() <= (a - b).abs() + 1e-15);
            assert_eq!(cutoff_hk(k, -a), -cutoff_hk(k, a));
        }
    }

    #[test]
    fn regularize_phi_fixed_point_on_constants() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let spec = fh(1.0, 2.0);
        let c = 0.3;
        let phi0 = ScalarField::constant(g, c);
        let k = 5.0;
        assert!(spec.psi0_prime(c).unwrap().abs() < k);
        let out = regularize_initial_phi(&phi0, k, &spec, &LinearSolveConfig::default()).unwrap();
        for &v in &out.values {
            assert!((v - c).abs() < 1e-9, "v = {v}");
        }
    }

    #[test]
    fn regularize_phi_bounds_psi0_prime() {
        let g = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let spec = fh(1.0, 2.0);
        // steep initial data close to the pure phases
        let phi0 = ScalarField::from_fn(g, |x, y, _| {
            0.98 * (2.0 * std::f64::consts::PI * x).cos() * (2.0 * std::f64::consts::PI * y).cos()
        });
        let k = 2.0;
        let out = regularize_initial_phi(&phi0, k, &spec, &LinearSolveConfig::default()).unwrap();
        let mut max_psi0p: f64 = 0.0;
        for &v in &out.values {
            max_psi0p = max_psi0p.max(spec.psi0_prime(v).unwrap().abs());
        }
        assert!(max_psi0p <= k + 1e-6, "max |Psi0'| = {max_psi0p}");
        // strict separation follows
        assert!(out.norm_linf() < 1.0);
        let delta_k = 1.0 - out.norm_linf();
        assert!(delta_k > 0.0, "measured separation {delta_k}");
    }

    #[test]
    fn regularize_phi_matches_dense_newton_oracle() {
        // independent dense Newton: assemble the Jacobian as a matrix and
        // solve each update by LU instead of CG
        use crate::dense::DenseMatrix;
        use crate::operators;

        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let spec = fh(1.0, 2.0);
        let phi0 = ScalarField::from_fn(g, |x, y, _| {
            0.85 * (std::f64::consts::PI * x).cos() * (2.0 * std::f64::consts::PI * y).sin()
        });
        let k = 2.5;
        let fast = regularize_initial_phi(&phi0, k, &spec, &LinearSolveConfig::default()).unwrap();

        // oracle
        let lap0 = operators::laplacian_neumann(&phi0);
        let mut rhs = ScalarField::zeros(g);
        for i in 0..rhs.values.len() {
            let mu = -lap0.values[i] + spec.psi0_prime(phi0.values[i]).unwrap();
            rhs.values[i] = cutoff_hk(k, mu);
        }
        let n = g.n_cells();
        let mut phi = phi0.map(|r| r.clamp(-0.999999, 0.999999));
        for _ in 0..60 {
            let lap = operators::laplacian_neumann(&phi);
            let mut res = vec![0.0; n];
            for i in 0..n {
                res[i] = -lap.values[i] + spec.psi0_prime(phi.values[i]).unwrap() - rhs.values[i];
            }
            let rnorm = (res.iter().map(|r| r * r).sum::<f64>() * g.cell_volume()).sqrt();
            if rnorm < 1e-12 {
                break;
            }
            let jac = DenseMatrix::from_operator(n, |x| {
                let xf = ScalarField {
                    grid: g,
                    values: x.to_vec(),
                    bc: phi.bc,
                };
                let mut y = operators::laplacian_neumann(&xf);
                y.scale(-1.0);
                for i in 0..n {
                    y.values[i] += spec.psi0_double_prime(phi.values[i]) * x[i];
                }
                y.values
            });
            let delta = jac.lu().unwrap().solve(&res);
            // plain full Newton is fine for the oracle at this size
            for i in 0..n {
                phi.values[i] -= delta[i];
            }
        }
        for i in 0..n {
            assert!(
                (fast.values[i] - phi.values[i]).abs() < 1e-8,
                "dense Newton oracle disagrees at {i}: {} vs {}",
                fast.values[i],
                phi.values[i]
            );
        }
    }

    #[test]
    fn regularize_sigma_constants_and_mean() {
        let g = Grid::new(&[12, 12], &[1.0, 1.0]).unwrap();
        let s0 = ScalarField::constant(g, 0.7);
        let out = regularize_initial_sigma(&s0, 4.0).unwrap();
        for &v in &out.values {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let mut rng = SplitMix64::new(9);
        let s1 = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
        let out = regularize_initial_sigma(&s1, 10.0).unwrap();
        assert!((out.mean() - s1.mean()).abs() < 1e-12);
    }

    #[test]
    fn regularize_sigma_large_k_limit() {
        let g = Grid::new(&[32, 32], &[1.0, 1.0]).unwrap();
        let s0 = ScalarField::from_fn(g, |x, y, _| {
            (std::f64::consts::PI * x).cos() + 0.5 * (std::f64::consts::PI * y).cos()
        });
        let out = regularize_initial_sigma(&s0, 1e8).unwrap();
        let mut diff = out.clone();
        diff.add_scaled(&s0, -1.0);
        assert!(diff.norm_l2() < 1e-4, "L2 distance {}", diff.norm_l2());
    }
}
