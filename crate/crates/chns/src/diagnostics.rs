//! Measured quantities: energies, dissipation, mass laws, separation, the
//! higher-order monitor, distances to equilibrium and rate fitting.
//!
//! The chemical potential entering every diagnostic is recomputed from the
//! model formula (no gamma or stabilization terms); the structural laws are
//! about the continuous system, not about the stepper's internal variables.

use crate::error::{Error, Result};
use crate::evolution::{self, SimState};
use crate::grid::{PhysParams, ScalarField, VectorField};
use crate::operators;
use crate::potentials::{self, PotentialSpec};
use crate::stationary::EquilibriumResult;

/// Per-step diagnostics row.
#[derive(Debug, Clone, Copy)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub step: u64,
    pub e_total: f64,
    pub f_free: f64,
    pub d_diss: f64,
    pub phi_mean: f64,
    /// Continuum mass law `c0 + exp(-alpha t) (mean0 - c0)`.
    pub phi_mean_pred: f64,
    /// Deviation from the exact discrete mean recurrence.
    pub phi_mean_err: f64,
    pub sigma_mean: f64,
    pub sigma_drift: f64,
    /// `1 - ||phi||_inf`.
    pub separation: f64,
    pub grad_mu: f64,
    pub grad_sigchi: f64,
    pub v_h1: f64,
    pub lambda: f64,
    /// Energy-balance residual; NaN on the first record of a run.
    pub energy_residual: f64,
    /// Integral of the diagnostic mu, carried for the balance residual.
    pub int_mu: f64,
}

/// Free energy
/// `F = int( |grad phi|^2/2 + Psi(phi) + sigma^2/2 - chi sigma phi )
///    + beta/2 ||grad N(phi - mean)||^2`.
pub fn free_energy(
    phi: &ScalarField,
    sigma: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<f64> {
    if phi.grid != sigma.grid {
        return Err(Error::GridMismatch);
    }
    let grad_sq = {
        let n = operators::grad_norm(phi);
        n * n
    };
    let (psi_vals, _) = potential.psi_field(phi)?;
    let bulk = psi_vals.integrate();
    let sigma_sq = {
        let n = sigma.norm_l2();
        n * n
    };
    let cross = sigma.dot(phi);
    let nonlocal = if params.beta != 0.0 {
        let n = evolution::nonlocal_term(phi)?;
        let g = operators::grad_norm(&n);
        g * g
    } else {
        0.0
    };
    Ok(0.5 * grad_sq + bulk + 0.5 * sigma_sq - params.chi * cross + 0.5 * params.beta * nonlocal)
}

/// Total energy `E = ||v||^2 / 2 + F`.
pub fn total_energy(
    state: &SimState,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<f64> {
    let ke = {
        let n = state.v.norm_l2();
        0.5 * n * n
    };
    Ok(ke + free_energy(&state.phi, &state.sigma, params, potential)?)
}

/// Dissipation
/// `D = int 2 nu(phi) |Dv|^2 + ||grad mu||^2 + ||grad(sigma - chi phi)||^2`,
/// with mu recomputed from the model formula.
pub fn dissipation(
    state: &SimState,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<f64> {
    let mu = evolution::chemical_potential(&state.phi, &state.sigma, params, potential)?;
    let nu = state
        .phi
        .map(|r| potentials::viscosity(params.nu1, params.nu2, r));
    let visc = operators::viscous_dissipation(&state.v, &nu);
    let gmu = operators::grad_norm(&mu);
    let gsc = grad_sigchi_norm(state, params);
    Ok(visc + gmu * gmu + gsc * gsc)
}

fn grad_sigchi_norm(state: &SimState, params: &PhysParams) -> f64 {
    let mut sc = state.sigma.clone();
    sc.add_scaled(&state.phi, -params.chi);
    operators::grad_norm(&sc)
}

/// A state-independent lower bound on the free energy, from completing the
/// square in the coupling terms (|phi| <= 1 for the singular potential; for
/// the quartic the current field bound is used).
pub fn free_energy_lower_bound(
    phi: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> f64 {
    let volume = phi.grid.volume();
    let mut min_psi = f64::INFINITY;
    for i in 0..=400 {
        let r = -1.0 + 2.0 * i as f64 / 400.0;
        if let Ok(v) = potential.psi(r) {
            min_psi = min_psi.min(v);
        }
    }
    let phi_bound = if potential.is_singular() {
        1.0
    } else {
        phi.norm_linf().max(1.0)
    };
    let phi_sq = volume * phi_bound * phi_bound;
    // sigma^2/2 - chi sigma phi >= -chi^2 phi^2 / 2
    let coupling = -0.5 * params.chi * params.chi * phi_sq;
    // negative beta: beta/2 ||grad N g||^2 >= beta/(2 z1) ||g||^2
    let nonlocal = if params.beta < 0.0 {
        let z1 = smallest_neumann_eigenvalue(phi);
        params.beta / (2.0 * z1) * 4.0 * phi_sq
    } else {
        0.0
    };
    volume * min_psi + coupling + nonlocal
}

fn smallest_neumann_eigenvalue(phi: &ScalarField) -> f64 {
    let g = phi.grid;
    let mut z1 = f64::INFINITY;
    for a in 0..g.dim() {
        let n = g.dims()[a] as f64;
        let h = g.spacing()[a];
        let s = (std::f64::consts::PI / (2.0 * n)).sin();
        z1 = z1.min(4.0 / (h * h) * s * s);
    }
    z1
}

/// Mass-law report.
#[derive(Debug, Clone, Copy)]
pub struct MassReport {
    pub phi_mean: f64,
    /// Continuum prediction `c0 + exp(-alpha t)(mean0 - c0)`.
    pub predicted: f64,
    /// |measured - continuum prediction|.
    pub abs_error_continuum: f64,
    /// |measured - exact discrete recurrence|.
    pub abs_error_discrete: f64,
    pub sigma_drift: f64,
}

pub fn mass_report(state: &SimState, params: &PhysParams) -> MassReport {
    let phi_mean = state.phi.mean();
    let predicted = params.c0 + (-params.alpha * state.t).exp() * (state.phi_mean0 - params.c0);
    MassReport {
        phi_mean,
        predicted,
        abs_error_continuum: (phi_mean - predicted).abs(),
        abs_error_discrete: (phi_mean - state.phi_mean_recurrence).abs(),
        sigma_drift: (state.sigma.mean() - state.sigma_mean0).abs(),
    }
}

/// The higher-order monitor
/// `Lambda = ||grad v||^2/2 + a1 ||grad mu||^2/2 + ||grad(sigma-chi phi)||^2/2
///           + a1 int (v . grad phi) mu + a1 alpha (mean phi - c0) int mu`.
pub fn higher_monitor(
    state: &SimState,
    params: &PhysParams,
    potential: &PotentialSpec,
    a1: f64,
) -> Result<f64> {
    if !(a1 > 0.0 && a1 < 1.0) {
        return Err(Error::Grid(format!("a1 must lie in (0, 1), got {a1}")));
    }
    let mu = evolution::chemical_potential(&state.phi, &state.sigma, params, potential)?;
    let gv = operators::velocity_gradient_norm(&state.v);
    let gmu = operators::grad_norm(&mu);
    let gsc = grad_sigchi_norm(state, params);
    let transport = transport_pairing(&state.v, &state.phi, &mu);
    let int_mu = mu.integrate();
    Ok(0.5 * gv * gv
        + 0.5 * a1 * gmu * gmu
        + 0.5 * gsc * gsc
        + a1 * transport
        + a1 * params.alpha * (state.phi.mean() - params.c0) * int_mu)
}

/// `int (v . grad phi) mu`, evaluated at faces with centered interpolation of
/// mu, matching the capillary-force pairing of the stepper.
fn transport_pairing(v: &VectorField, phi: &ScalarField, mu: &ScalarField) -> f64 {
    let force = evolution::capillary_force(mu, &ScalarField::zeros(phi.grid), phi, 0.0);
    v.dot(&force)
}

/// Norms of the distance to an equilibrium.
#[derive(Debug, Clone, Copy)]
pub struct EquilibriumDistance {
    pub l2_v: f64,
    pub h1_phi: f64,
    pub l2_sigma: f64,
    pub dual_phi: f64,
    pub dual_sigma: f64,
}

impl EquilibriumDistance {
    /// The rate-law quantity `||v|| + ||phi - phi_inf||_H1 + ||sigma - sigma_inf||`.
    pub fn rate_quantity(&self) -> f64 {
        self.l2_v + self.h1_phi + self.l2_sigma
    }
}

/// Distances between a state and an equilibrium; the dual norms are computed
/// through N on the zero-mean parts plus the mean component.
pub fn distance_to_equilibrium(
    state: &SimState,
    eq: &EquilibriumResult,
) -> Result<EquilibriumDistance> {
    if state.phi.grid != eq.phi_inf.grid {
        return Err(Error::GridMismatch);
    }
    let mut dphi = state.phi.clone();
    dphi.add_scaled(&eq.phi_inf, -1.0);
    let mut dsigma = state.sigma.clone();
    dsigma.add_scaled(&eq.sigma_inf, -1.0);

    let gd = operators::grad_norm(&dphi);
    let h1_phi = (dphi.norm_l2().powi(2) + gd * gd).sqrt();

    let plan = crate::spectral::plan_for(&state.phi.grid);
    let dual = |d: &ScalarField| -> f64 {
        let mean = d.mean();
        let mut zm = d.clone();
        zm.set_mean(0.0);
        let n = plan.solve_poisson_zero_mean(&zm);
        let g = operators::grad_norm(&n);
        (g * g + mean * mean).sqrt()
    };

    Ok(EquilibriumDistance {
        l2_v: state.v.norm_l2(),
        h1_phi,
        l2_sigma: dsigma.norm_l2(),
        dual_phi: dual(&dphi),
        dual_sigma: dual(&dsigma),
    })
}

/// Energy-balance residual between two consecutive records:
/// `R = (E_curr - E_prev)/dt + D_curr + alpha (mean phi - c0) int mu`.
pub fn energy_balance_residual(
    prev: &DiagnosticsRecord,
    curr: &DiagnosticsRecord,
    params: &PhysParams,
) -> Result<f64> {
    let dt = curr.t - prev.t;
    if !(dt > 0.0) {
        return Err(Error::Grid(format!(
            "records must be consecutive in time, got dt = {dt}"
        )));
    }
    Ok((curr.e_total - prev.e_total) / dt
        + curr.d_diss
        + params.alpha * (curr.phi_mean - params.c0) * curr.int_mu)
}

/// Build the full record for a state; `prev` enables the balance residual.
pub fn record(
    state: &SimState,
    params: &PhysParams,
    potential: &PotentialSpec,
    a1: f64,
    prev: Option<&DiagnosticsRecord>,
) -> Result<DiagnosticsRecord> {
    let mu = evolution::chemical_potential(&state.phi, &state.sigma, params, potential)?;
    let f_free = free_energy(&state.phi, &state.sigma, params, potential)?;
    let ke = {
        let n = state.v.norm_l2();
        0.5 * n * n
    };
    let e_total = ke + f_free;
    let nu = state
        .phi
        .map(|r| potentials::viscosity(params.nu1, params.nu2, r));
    let visc = operators::viscous_dissipation(&state.v, &nu);
    let gmu = operators::grad_norm(&mu);
    let gsc = grad_sigchi_norm(state, params);
    let d_diss = visc + gmu * gmu + gsc * gsc;
    let mass = mass_report(state, params);
    let int_mu = mu.integrate();
    let gv = operators::velocity_gradient_norm(&state.v);
    let vl2 = state.v.norm_l2();
    let transport = transport_pairing(&state.v, &state.phi, &mu);
    let lambda = 0.5 * gv * gv
        + 0.5 * a1 * gmu * gmu
        + 0.5 * gsc * gsc
        + a1 * transport
        + a1 * params.alpha * (mass.phi_mean - params.c0) * int_mu;

    let mut rec = DiagnosticsRecord {
        t: state.t,
        step: state.step,
        e_total,
        f_free,
        d_diss,
        phi_mean: mass.phi_mean,
        phi_mean_pred: mass.predicted,
        phi_mean_err: mass.abs_error_discrete,
        sigma_mean: state.sigma.mean(),
        sigma_drift: mass.sigma_drift,
        separation: 1.0 - state.phi.norm_linf(),
        grad_mu: gmu,
        grad_sigchi: gsc,
        v_h1: (vl2 * vl2 + gv * gv).sqrt(),
        lambda,
        energy_residual: f64::NAN,
        int_mu,
    };
    if let Some(p) = prev {
        rec.energy_residual = energy_balance_residual(p, &rec, params)?;
    }
    Ok(rec)
}

/// Scan for a coefficient C making the modified energy
/// `E(t) + C exp(-alpha t) |mean(phi0) - c0|` non-increasing along a record
/// series. The analysis provides such a constant without a computable value;
/// the scan reports the smallest one from the supplied range, or None when
/// no candidate works (e.g. alpha = 0 and the bare energy is not monotone).
pub fn lyapunov_coefficient_scan(
    records: &[DiagnosticsRecord],
    params: &PhysParams,
    phi_mean0: f64,
    candidates: &[f64],
    slack: f64,
) -> Option<f64> {
    let m = (phi_mean0 - params.c0).abs();
    for &c in candidates {
        let mut ok = true;
        let mut prev = f64::INFINITY;
        for r in records {
            let e_hat = r.e_total + c * (-params.alpha * r.t).exp() * m;
            if e_hat > prev + slack {
                ok = false;
                break;
            }
            prev = e_hat;
        }
        if ok {
            return Some(c);
        }
    }
    None
}

/// Decay-rate fit.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    /// Lojasiewicz exponent recovered from the power-law slope.
    pub kappa: f64,
    /// Fitted decay exponent p in `d ~ (1+t)^{-p}`; kappa = p / (1 + 2p).
    pub exponent: f64,
    pub r_squared: f64,
    pub window: (f64, f64),
    pub flagged_exponential: bool,
}

/// Least-squares fit of `log d` against `log(1+t)` over the window, with an
/// exponential-decay alternative decided by comparing fit residuals.
pub fn fit_convergence_rate(series: &[(f64, f64)], window: Option<(f64, f64)>) -> Result<RateFit> {
    let window = match window {
        Some(w) => w,
        None => default_window(series)?,
    };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .copied()
        .collect();
    if pts.len() < 8 {
        return Err(Error::FitWindow(format!(
            "need at least 8 points in the window, got {}",
            pts.len()
        )));
    }
    if pts.iter().any(|(_, d)| !(*d > 0.0)) {
        return Err(Error::FitWindow(
            "distances must be strictly positive".into(),
        ));
    }

    let ys: Vec<f64> = pts.iter().map(|(_, d)| d.ln()).collect();
    let x_pow: Vec<f64> = pts.iter().map(|(t, _)| (1.0 + t).ln()).collect();
    let x_exp: Vec<f64> = pts.iter().map(|(t, _)| *t).collect();

    let (slope_pow, ssr_pow, r2_pow) = linear_fit(&x_pow, &ys);
    let (_slope_exp, ssr_exp, _r2_exp) = linear_fit(&x_exp, &ys);

    let p = -slope_pow;
    let flagged_exponential = ssr_exp < ssr_pow;
    if p <= 0.0 && !flagged_exponential {
        return Err(Error::FitWindow(format!(
            "series does not decay (fitted exponent {p})"
        )));
    }
    let kappa = if p > 0.0 {
        p / (1.0 + 2.0 * p)
    } else {
        f64::NAN
    };
    Ok(RateFit {
        kappa,
        exponent: p,
        r_squared: r2_pow,
        window,
        flagged_exponential,
    })
}

/// Default fitting window: the transient ends the first time the series
/// drops below 10% of its maximum; fit on the last 60% of what remains.
fn default_window(series: &[(f64, f64)]) -> Result<(f64, f64)> {
    if series.is_empty() {
        return Err(Error::FitWindow("empty series".into()));
    }
    let dmax = series.iter().map(|(_, d)| *d).fold(0.0f64, f64::max);
    let t_transient = series
        .iter()
        .find(|(_, d)| *d < 0.1 * dmax)
        .map(|(t, _)| *t)
        .unwrap_or(series[0].0);
    let t_last = series.last().unwrap().0;
    let start = t_transient + 0.4 * (t_last - t_transient);
    Ok((start, t_last))
}

/// Simple least squares y = a + b x; returns (b, SSR, r^2).
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (&xi, &yi) in x.iter().zip(y.iter()) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
        syy += (yi - my) * (yi - my);
    }
    let b = sxy / sxx;
    let ssr = syy - b * sxy;
    let r2 = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    (b, ssr, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::StepperConfig;
    use crate::grid::Grid;
    use crate::rng::SplitMix64;

    fn params_with(chi: f64, beta: f64) -> PhysParams {
        PhysParams {
            chi,
            beta,
            ..PhysParams::default()
        }
    }

    #[test]
    fn free_energy_uniform_state() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let pot = PotentialSpec::quartic();
        let params = params_with(0.7, 0.0);
        let c = 0.4;
        let s = -0.3;
        let phi = ScalarField::constant(g, c);
        let sigma = ScalarField::constant(g, s);
        let f = free_energy(&phi, &sigma, &params, &pot).unwrap();
        let expect = g.volume() * (pot.psi(c).unwrap() + 0.5 * s * s - params.chi * s * c);
        assert!((f - expect).abs() < 1e-12, "{f} vs {expect}");

        // beta term contributes nothing for uniform phi
        let params_b = params_with(0.7, 2.0);
        let fb = free_energy(&phi, &sigma, &params_b, &pot).unwrap();
        assert!((fb - expect).abs() < 1e-12);
    }

    #[test]
    fn free_energy_matches_term_by_term_oracle() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let pot = PotentialSpec::quartic();
        let params = params_with(0.5, 0.8);
        let mut rng = SplitMix64::new(113);
        let phi = ScalarField::from_fn(g, |_, _, _| 0.6 * rng.next_symm());
        let sigma = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
        let f = free_energy(&phi, &sigma, &params, &pot).unwrap();

        // oracle with naive loops and a dense inverse for the nonlocal term
        let h = g.spacing()[0];
        let vol = g.cell_volume();
        let mut grad_sq = 0.0;
        for iy in 0..8usize {
            for ix in 0..8usize {
                if ix + 1 < 8 {
                    let d = (phi.at(ix + 1, iy, 0) - phi.at(ix, iy, 0)) / h;
                    grad_sq += d * d * vol;
                }
                if iy + 1 < 8 {
                    let d = (phi.at(ix, iy + 1, 0) - phi.at(ix, iy, 0)) / h;
                    grad_sq += d * d * vol;
                }
            }
        }
        let mut bulk = 0.0;
        let mut sig_sq = 0.0;
        let mut cross = 0.0;
        for i in 0..64 {
            bulk += pot.psi(phi.values[i]).unwrap() * vol;
            sig_sq += sigma.values[i] * sigma.values[i] * vol;
            cross += sigma.values[i] * phi.values[i] * vol;
        }
        let mut zm = phi.clone();
        zm.set_mean(0.0);
        let n = crate::operators::inv_neumann_laplacian(
            &zm,
            &crate::operators::LinearSolveConfig {
                method: crate::operators::SolveMethod::DirectDense,
                ..Default::default()
            },
        )
        .unwrap();
        let gn = crate::operators::grad_norm(&n);
        let expect =
            0.5 * grad_sq + bulk + 0.5 * sig_sq - params.chi * cross + 0.5 * params.beta * gn * gn;
        let rel = (f - expect).abs() / expect.abs().max(1e-30);
        assert!(rel < 1e-10, "rel = {rel:e}");
    }

    #[test]
    fn free_energy_sign_symmetry() {
        // F(phi, sigma) = F(-phi, -sigma) for even potentials
        let g = Grid::new(&[10, 6], &[1.0, 1.0]).unwrap();
        let params = params_with(0.6, 0.9);
        let mut rng = SplitMix64::new(127);
        for pot in [
            PotentialSpec::quartic(),
            PotentialSpec::flory_huggins(1.0, 2.0).unwrap(),
        ] {
            let phi = ScalarField::from_fn(g, |_, _, _| 0.5 * rng.next_symm());
            let sigma = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
            let f1 = free_energy(&phi, &sigma, &params, &pot).unwrap();
            let nphi = phi.map(|v| -v);
            let nsigma = sigma.map(|v| -v);
            let f2 = free_energy(&nphi, &nsigma, &params, &pot).unwrap();
            assert!((f1 - f2).abs() < 1e-11 * f1.abs().max(1.0));
        }
    }

    #[test]
    fn dissipation_zero_at_uniform_rest() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let params = params_with(0.4, 0.0);
        let pot = PotentialSpec::quartic();
        let state = SimState::new(
            VectorField::zeros(g),
            ScalarField::constant(g, 0.2),
            ScalarField::constant(g, 0.1),
            &params,
            &pot,
        )
        .unwrap();
        let d = dissipation(&state, &params, &pot).unwrap();
        assert!(d.abs() < 1e-12, "D = {d}");
    }

    #[test]
    fn dissipation_positive_for_moving_fluid() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let params = PhysParams::default();
        let pot = PotentialSpec::quartic();
        let mut rng = SplitMix64::new(131);
        let mut v = VectorField::zeros(g);
        for a in 0..2 {
            for val in v.comp_mut(a).iter_mut() {
                *val = rng.next_symm();
            }
        }
        let state = SimState::new(
            v,
            ScalarField::constant(g, 0.0),
            ScalarField::constant(g, 0.0),
            &params,
            &pot,
        )
        .unwrap();
        // the projected field is nonzero and dissipation strictly positive
        assert!(state.v.norm_l2() > 1e-8);
        let d = dissipation(&state, &params, &pot).unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn energy_lower_bound_holds() {
        let g = Grid::new(&[12, 12], &[1.0, 1.0]).unwrap();
        let params = params_with(1.5, -2.0);
        let mut rng = SplitMix64::new(137);
        for pot in [
            PotentialSpec::quartic(),
            PotentialSpec::flory_huggins(1.0, 2.0).unwrap(),
        ] {
            for _ in 0..10 {
                let phi = ScalarField::from_fn(g, |_, _, _| 0.9 * rng.next_symm());
                let sigma = ScalarField::from_fn(g, |_, _, _| 2.0 * rng.next_symm());
                let f = free_energy(&phi, &sigma, &params, &pot).unwrap();
                let bound = free_energy_lower_bound(&phi, &params, &pot);
                assert!(f >= bound - 1e-9, "F = {f} below bound {bound}");
            }
        }
    }

    #[test]
    fn mass_report_closed_form() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let mut params = PhysParams::default();
        params.alpha = 1.0;
        params.c0 = 0.0;
        let pot = PotentialSpec::quartic();
        let mut state = SimState::new(
            VectorField::zeros(g),
            ScalarField::constant(g, 0.5),
            ScalarField::zeros(g),
            &params,
            &pot,
        )
        .unwrap();
        state.t = std::f64::consts::LN_2;
        let rep = mass_report(&state, &params);
        assert!((rep.predicted - 0.25).abs() < 1e-14);

        // alpha = 0: prediction equals the initial mean
        let params0 = PhysParams::default();
        let rep0 = mass_report(&state, &params0);
        assert!((rep0.predicted - 0.5).abs() < 1e-15);
        assert!(rep0.abs_error_discrete < 1e-13);
    }

    #[test]
    fn monitor_vanishes_at_uniform_equilibrium() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let params = params_with(0.3, 0.0);
        let pot = PotentialSpec::quartic();
        let state = SimState::new(
            VectorField::zeros(g),
            ScalarField::constant(g, 0.1),
            ScalarField::constant(g, 0.4),
            &params,
            &pot,
        )
        .unwrap();
        let lam = higher_monitor(&state, &params, &pot, 0.1).unwrap();
        assert!(lam.abs() < 1e-10, "Lambda = {lam}");
        assert!(higher_monitor(&state, &params, &pot, 1.5).is_err());
    }

    #[test]
    fn monitor_lower_bound_structure() {
        // Lambda >= (1/4)||grad v||^2 + (a1/4)||grad mu||^2
        //           + (1/4)||grad(sigma-chi phi)||^2 - slack,
        // slack -> 0 when alpha |mean - c0| -> 0
        let g = Grid::new(&[16, 16], &[2.0, 2.0]).unwrap();
        let mut params = params_with(0.4, 0.2);
        params.alpha = 0.0;
        let pot = PotentialSpec::quartic();
        let mut rng = SplitMix64::new(139);
        let phi = ScalarField::from_fn(g, |_, _, _| 0.3 * rng.next_symm());
        let sigma = ScalarField::from_fn(g, |_, _, _| 0.3 * rng.next_symm());
        let mut v = VectorField::zeros(g);
        for a in 0..2 {
            for val in v.comp_mut(a).iter_mut() {
                *val = 0.05 * rng.next_symm();
            }
        }
        let state = SimState::new(v, phi, sigma, &params, &pot).unwrap();
        let a1 = 0.1;
        let mu = evolution::chemical_potential(&state.phi, &state.sigma, &params, &pot).unwrap();
        let gv = operators::velocity_gradient_norm(&state.v);
        let gmu = operators::grad_norm(&mu);
        let gsc = grad_sigchi_norm(&state, &params);
        let lam = higher_monitor(&state, &params, &pot, a1).unwrap();
        // with alpha = 0 the slack is only the transport pairing, which the
        // quarter-coefficients must absorb for small velocity
        let lower = 0.25 * gv * gv + 0.25 * a1 * gmu * gmu + 0.25 * gsc * gsc;
        assert!(
            lam >= lower - 1e-9,
            "Lambda {lam} < structural bound {lower}"
        );
    }

    #[test]
    fn balance_residual_stationary_state() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let params = PhysParams::default();
        let pot = PotentialSpec::quartic();
        let state = SimState::new(
            VectorField::zeros(g),
            ScalarField::constant(g, 0.3),
            ScalarField::zeros(g),
            &params,
            &pot,
        )
        .unwrap();
        let r0 = record(&state, &params, &pot, 0.1, None).unwrap();
        let mut later = state.clone();
        later.t = 0.5;
        let r1 = record(&later, &params, &pot, 0.1, Some(&r0)).unwrap();
        assert!(r1.energy_residual.abs() < 1e-10);
        // non-consecutive records rejected
        assert!(energy_balance_residual(&r1, &r0, &params).is_err());
    }

    #[test]
    fn lyapunov_scan_finds_a_working_coefficient() {
        // E rises like 2 - exp(-t): the bare energy is not monotone, but
        // E + C exp(-t) |m0 - c0| is non-increasing once C |m0 - c0| >= 1
        let mut params = PhysParams::default();
        params.alpha = 1.0;
        params.c0 = 0.0;
        let m0 = 0.5;
        let records: Vec<DiagnosticsRecord> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.05;
                let mut r = sample_zero_record();
                r.t = t;
                r.e_total = 2.0 - (-t).exp();
                r
            })
            .collect();
        let found = lyapunov_coefficient_scan(&records, &params, m0, &[0.0, 1.0, 2.0, 4.0], 1e-12);
        assert_eq!(found, Some(2.0));
        // without the reaction (alpha = 0) no coefficient can help
        params.alpha = 0.0;
        let none = lyapunov_coefficient_scan(&records, &params, m0, &[0.0, 1.0, 2.0], 1e-12);
        assert_eq!(none, None);
    }

    fn sample_zero_record() -> DiagnosticsRecord {
        DiagnosticsRecord {
            t: 0.0,
            step: 0,
            e_total: 0.0,
            f_free: 0.0,
            d_diss: 0.0,
            phi_mean: 0.0,
            phi_mean_pred: 0.0,
            phi_mean_err: 0.0,
            sigma_mean: 0.0,
            sigma_drift: 0.0,
            separation: 1.0,
            grad_mu: 0.0,
            grad_sigchi: 0.0,
            v_h1: 0.0,
            lambda: 0.0,
            energy_residual: f64::NAN,
            int_mu: 0.0,
        }
    }

    #[test]
    fn rate_fit_recovers_power_laws() {
        let series1: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.5;
                (t, (1.0 + t).powi(-1))
            })
            .collect();
        let fit = fit_convergence_rate(&series1, Some((0.0, 100.0))).unwrap();
        assert!((fit.exponent - 1.0).abs() < 0.01);
        assert!(
            (fit.kappa - 1.0 / 3.0).abs() < 0.01 / 3.0,
            "kappa {}",
            fit.kappa
        );
        assert!(!fit.flagged_exponential);
        assert!(fit.r_squared > 0.999);

        let series3: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.5;
                (t, (1.0 + t).powi(-3))
            })
            .collect();
        let fit = fit_convergence_rate(&series3, Some((0.0, 100.0))).unwrap();
        assert!((fit.kappa - 3.0 / 7.0).abs() < 0.01 * 3.0 / 7.0);

        let series_exp: Vec<(f64, f64)> = (0..200)
            .map(|i| {
                let t = i as f64 * 0.1;
                (t, (-t).exp())
            })
            .collect();
        let fit = fit_convergence_rate(&series_exp, Some((0.0, 20.0))).unwrap();
        assert!(fit.flagged_exponential);
    }

    #[test]
    fn rate_fit_scale_invariant() {
        let series: Vec<(f64, f64)> = (0..100)
            .map(|i| {
                let t = i as f64 * 0.3;
                (t, 7.0 * (1.0 + t).powf(-2.0))
            })
            .collect();
        let f1 = fit_convergence_rate(&series, Some((0.0, 30.0))).unwrap();
        let scaled: Vec<(f64, f64)> = series.iter().map(|(t, d)| (*t, 1e6 * d)).collect();
        let f2 = fit_convergence_rate(&scaled, Some((0.0, 30.0))).unwrap();
        assert!((f1.kappa - f2.kappa).abs() < 1e-12);
        assert_eq!(f1.flagged_exponential, f2.flagged_exponential);
    }

    #[test]
    fn rate_fit_needs_points() {
        let series: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 1.0 / (1.0 + i as f64))).collect();
        assert!(fit_convergence_rate(&series, Some((0.0, 10.0))).is_err());
    }

    #[test]
    fn distance_zero_at_equilibrium() {
        let g = Grid::new(&[8, 8], &[1.0, 1.0]).unwrap();
        let params = PhysParams::default();
        let pot = PotentialSpec::quartic();
        let phi = ScalarField::constant(g, 0.2);
        let sigma = ScalarField::constant(g, 0.3);
        let state = SimState::new(
            VectorField::zeros(g),
            phi.clone(),
            sigma.clone(),
            &params,
            &pot,
        )
        .unwrap();
        let eq = EquilibriumResult {
            phi_inf: phi,
            sigma_inf: sigma,
            energy: 0.0,
            residual: 0.0,
            separation: 0.8,
            iterations: 0,
            converged: true,
        };
        let d = distance_to_equilibrium(&state, &eq).unwrap();
        assert!(d.l2_v < 1e-12);
        assert!(d.h1_phi < 1e-12);
        assert!(d.l2_sigma < 1e-12);
        assert!(d.dual_phi < 1e-12);
        assert!(d.dual_sigma < 1e-12);
    }

    #[test]
    fn dual_norm_below_l2_for_zero_mean() {
        let g = Grid::new(&[16, 16], &[1.0, 1.0]).unwrap();
        let params = PhysParams::default();
        let pot = PotentialSpec::quartic();
        let mut rng = SplitMix64::new(149);
        let mut dphi = ScalarField::from_fn(g, |_, _, _| rng.next_symm());
        dphi.set_mean(0.0);
        let base = ScalarField::zeros(g);
        let mut phi = base.clone();
        phi.add_scaled(&dphi, 1.0);
        let state = SimState::new(VectorField::zeros(g), phi, base.clone(), &params, &pot).unwrap();
        let eq = EquilibriumResult {
            phi_inf: base.clone(),
            sigma_inf: base,
            energy: 0.0,
            residual: 0.0,
            separation: 1.0,
            iterations: 0,
            converged: true,
        };
        let d = distance_to_equilibrium(&state, &eq).unwrap();
        // || f ||_{V0'} <= C_P || f ||, with C_P = 1/sqrt(z1) on the grid
        let cp = 1.0 / smallest_neumann_eigenvalue(&state.phi).sqrt();
        assert!(d.dual_phi <= cp * dphi.norm_l2() * (1.0 + 1e-10));
    }

    #[test]
    fn spinodal_balance_residual_first_order_in_dt() {
        // the scheme's energy-balance defect halves when dt halves; the
        // initial data is smoothed so the fast transients are resolved
        let g = Grid::new(&[24, 24], &[6.0, 6.0]).unwrap();
        let pot = PotentialSpec::quartic();
        let mut params = PhysParams::default();
        params.chi = 0.2;
        params.beta = 0.3;
        let t_end = 0.1;
        let mut residuals = Vec::new();
        for &dt in &[1e-3, 5e-4] {
            let mut cfg = StepperConfig::new(dt, pot, params);
            cfg.stabilization = 2.0;
            // low-mode initial data: every excited relaxation rate is
            // resolved at these step sizes
            let pi = std::f64::consts::PI;
            let phi = ScalarField::from_fn(g, |x, y, _| {
                0.2 * (2.0 * pi * x / 6.0).cos() * (pi * y / 6.0).cos()
            });
            let sigma = ScalarField::from_fn(g, |x, y, _| {
                0.1 * (pi * x / 6.0).cos() + 0.05 * (pi * y / 6.0).cos()
            });
            let mut state =
                SimState::new(VectorField::zeros(g), phi, sigma, &params, &pot).unwrap();
            let mut prev = record(&state, &params, &pot, 0.1, None).unwrap();
            let mut max_r: f64 = 0.0;
            let mut max_signed: f64 = f64::NEG_INFINITY;
            while state.t < t_end - 1e-12 {
                evolution::step(&mut state, &cfg).unwrap();
                let rec = record(&state, &params, &pot, 0.1, Some(&prev)).unwrap();
                max_r = max_r.max(rec.energy_residual.abs());
                max_signed = max_signed.max(rec.energy_residual);
                prev = rec;
            }
            residuals.push(max_r);
            // dissipativity: the residual stays below a small positive level
            // commensurate with the scheme's O(dt) defect
            assert!(max_signed < 5e-3, "signed residual {max_signed} at dt {dt}");
        }
        let ratio = residuals[0] / residuals[1];
        assert!(
            (1.7..=2.3).contains(&ratio),
            "residual ratio {ratio}, residuals {residuals:?}"
        );
    }
}
