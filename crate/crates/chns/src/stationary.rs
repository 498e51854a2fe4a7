//! Equilibrium and energy-minimization solvers.
//!
//! Two independent routes to the same stationary states:
//! - `cho_flow`: the viscous Cahn-Hilliard flow of the coupled pair
//!   (fluid off, alpha = 0), run until the dissipation components vanish;
//! - `reduced_equilibrium`: preconditioned descent on the reduced
//!   single-field energy, exploiting that `sigma - chi phi` is constant at
//!   any equilibrium, with sigma reconstructed algebraically afterwards.
//!
//! `minimize_energy` runs the flow from several seeded starts and keeps the
//! lowest-energy candidate.

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::evolution::{self, SimState, StepperConfig};
use crate::grid::{Grid, PhysParams, ScalarField, VectorField};
use crate::operators;
use crate::potentials::PotentialSpec;
use crate::rng::SplitMix64;

/// Outcome of an equilibrium solve.
#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub phi_inf: ScalarField,
    pub sigma_inf: ScalarField,
    /// Free energy F(phi_inf, sigma_inf).
    pub energy: f64,
    /// r1 + r2 of `stationary_residual`.
    pub residual: f64,
    /// `1 - ||phi_inf||_inf`.
    pub separation: f64,
    pub iterations: u64,
    pub converged: bool,
}

impl EquilibriumResult {
    /// Pointwise spread of `sigma - chi phi`, which must be constant at any
    /// equilibrium.
    pub fn sigma_chi_spread(&self, chi: f64) -> f64 {
        let mut sc = self.sigma_inf.clone();
        sc.add_scaled(&self.phi_inf, -chi);
        let max = sc.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = sc.values.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Residuals of the stationary system:
/// r1 is the L2 norm of the zero-mean part of
/// `-lap phi + Psi'(phi) - chi sigma + beta N(phi - mean phi)`,
/// r2 is `||grad(sigma - chi phi)||`.
pub fn stationary_residual(
    phi: &ScalarField,
    sigma: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<(f64, f64)> {
    let mut lhs = evolution::chemical_potential(phi, sigma, params, potential)?;
    lhs.set_mean(0.0);
    let r1 = lhs.norm_l2();
    let mut sc = sigma.clone();
    sc.add_scaled(phi, -params.chi);
    let r2 = operators::grad_norm(&sc);
    Ok((r1, r2))
}

/// Options shared by the equilibrium drivers.
#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub gamma: f64,
    pub dt: f64,
    pub tol: f64,
    pub max_steps: u64,
    /// Steps between convergence checks.
    pub check_every: u64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self {
            gamma: 0.1,
            dt: 0.05,
            tol: 1e-9,
            max_steps: 400_000,
            check_every: 10,
        }
    }
}

/// Equilibrate by running the viscous Cahn-Hilliard-Oono flow with the fluid
/// frozen and alpha = 0, until both the dissipation components
/// `||grad mu|| + ||grad(sigma - chi phi)||` and the stationary residuals
/// drop below the tolerance. The free energy is checked to be non-increasing
/// along the discrete flow; an increase halves the step.
pub fn cho_flow(
    phi0: &ScalarField,
    sigma0: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
    opts: &FlowOptions,
) -> Result<EquilibriumResult> {
    if phi0.mean().abs() >= 1.0 {
        return Err(Error::Grid("cho_flow requires |mean(phi0)| < 1".into()));
    }
    let mut flow_params = *params;
    flow_params.alpha = 0.0;
    let mut cfg = StepperConfig::new(opts.dt, *potential, flow_params);
    cfg.gamma = opts.gamma;
    cfg.freeze_velocity = true;

    let mut state = SimState::new(
        VectorField::zeros(phi0.grid),
        phi0.clone(),
        sigma0.clone(),
        &flow_params,
        potential,
    )?;

    let mut f_prev = diagnostics::free_energy(&state.phi, &state.sigma, &flow_params, potential)?;
    let mut converged = false;
    let mut steps = 0u64;
    while steps < opts.max_steps {
        for _ in 0..opts.check_every {
            evolution::step(&mut state, &cfg)?;
            steps += 1;
        }
        let f_now = diagnostics::free_energy(&state.phi, &state.sigma, &flow_params, potential)?;
        if f_now > f_prev + 1e-10 * (1.0 + f_prev.abs()) {
            // stabilization margin too small for this step size
            cfg.dt *= 0.5;
            if cfg.dt < 1e-12 {
                return Err(Error::Solver {
                    what: "cho_flow (energy increased at vanishing dt)",
                    residual: f_now - f_prev,
                    iterations: steps as usize,
                });
            }
        }
        f_prev = f_now.min(f_prev);

        let mu = evolution::chemical_potential(&state.phi, &state.sigma, &flow_params, potential)?;
        let gmu = operators::grad_norm(&mu);
        let mut sc = state.sigma.clone();
        sc.add_scaled(&state.phi, -flow_params.chi);
        let gsc = operators::grad_norm(&sc);
        if gmu + gsc < opts.tol {
            let (r1, r2) = stationary_residual(&state.phi, &state.sigma, &flow_params, potential)?;
            if r1 + r2 < opts.tol {
                converged = true;
                break;
            }
        }
    }

    let (r1, r2) = stationary_residual(&state.phi, &state.sigma, &flow_params, potential)?;
    let energy = diagnostics::free_energy(&state.phi, &state.sigma, &flow_params, potential)?;
    Ok(EquilibriumResult {
        separation: 1.0 - state.phi.norm_linf(),
        phi_inf: state.phi,
        sigma_inf: state.sigma,
        energy,
        residual: r1 + r2,
        iterations: steps,
        converged,
    })
}

/// Reduced energy over the single field:
/// `F~(phi) = int(|grad phi|^2/2 + Psi(phi)) - chi^2 ||phi||^2 / 2
///            + beta/2 ||grad N(phi - mean)||^2`.
pub fn reduced_energy(
    phi: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<f64> {
    let g = operators::grad_norm(phi);
    let (psi_vals, _) = potential.psi_field(phi)?;
    let bulk = psi_vals.integrate();
    let l2 = phi.norm_l2();
    let nonlocal = if params.beta != 0.0 {
        let n = evolution::nonlocal_term(phi)?;
        let gn = operators::grad_norm(&n);
        gn * gn
    } else {
        0.0
    };
    Ok(0.5 * g * g + bulk - 0.5 * params.chi * params.chi * l2 * l2 + 0.5 * params.beta * nonlocal)
}

/// Zero-mean gradient of the reduced energy:
/// `-lap phi + (Psi'(phi) - mean) - chi^2 (phi - mean phi) + beta N(phi - mean)`.
fn reduced_gradient(
    phi: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<ScalarField> {
    let (psi_p, _) = potential.psi_prime_field(phi)?;
    let lap = operators::laplacian_neumann(phi);
    let mut r = psi_p;
    r.add_scaled(&lap, -1.0);
    r.add_scaled(phi, -params.chi * params.chi);
    if params.beta != 0.0 {
        let n = evolution::nonlocal_term(phi)?;
        r.add_scaled(&n, params.beta);
    }
    r.set_mean(0.0);
    Ok(r)
}

/// Solve the reduced stationary equation by preconditioned descent on the
/// reduced energy with a backtracking line search, then reconstruct
/// `sigma = chi phi + (m2 - chi m1)`.
pub fn reduced_equilibrium(
    phi_guess: &ScalarField,
    m1: f64,
    m2: f64,
    params: &PhysParams,
    potential: &PotentialSpec,
    tol: f64,
) -> Result<EquilibriumResult> {
    const MAX_ITER: u64 = 200_000;
    const ARMIJO: f64 = 1e-4;
    if !(m1 > -1.0 && m1 < 1.0) {
        return Err(Error::Grid(format!("m1 must lie in (-1, 1), got {m1}")));
    }
    let mut phi = phi_guess.clone();
    phi.set_mean(m1);
    if potential.is_singular() && phi.norm_linf() >= 1.0 {
        return Err(Error::SeparationViolation {
            min_separation: 1.0 - phi.norm_linf(),
            step: 0,
        });
    }

    let plan = crate::spectral::plan_for(&phi.grid);
    let shift = 1.0 + evolution::default_stabilization(potential);
    let mut energy = reduced_energy(&phi, params, potential)?;
    let mut iterations = 0u64;
    let mut converged = false;
    let mut lambda0 = 1.0f64;

    while iterations < MAX_ITER {
        let r = reduced_gradient(&phi, params, potential)?;
        if r.norm_l2() < tol {
            converged = true;
            break;
        }
        // descent direction d = -(shift + (-lap))^{-1} r, zero-mean
        let mut d = plan.solve_helmholtz(&r, shift, 1.0)?;
        d.scale(-1.0);
        d.set_mean(0.0);
        if r.norm_l2() < 1e-6 {
            // the energy decrement is below evaluation noise here; the plain
            // preconditioned iteration is contractive near a minimum, so
            // drop the line search
            let mut trial = phi.clone();
            trial.add_scaled(&d, 1.0);
            if potential.is_singular() && trial.norm_linf() >= 1.0 - 1e-9 {
                break;
            }
            phi = trial;
            iterations += 1;
            continue;
        }
        let slope = r.dot(&d); // negative
        let mut lambda = lambda0;
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = phi.clone();
            trial.add_scaled(&d, lambda);
            let admissible = !potential.is_singular() || trial.norm_linf() < 1.0 - 1e-9;
            if admissible {
                let e_trial = reduced_energy(&trial, params, potential)?;
                if e_trial <= energy + ARMIJO * lambda * slope {
                    phi = trial;
                    energy = e_trial;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            break;
        }
        lambda0 = (lambda * 2.0).min(1.0);
        iterations += 1;
    }

    // sigma_s = chi phi_s + (m2 - chi m1), constant spread by construction
    let mut sigma = phi.map(|v| params.chi * v);
    sigma.shift(m2 - params.chi * m1);
    let (r1, r2) = stationary_residual(&phi, &sigma, params, potential)?;
    let energy_full = diagnostics::free_energy(&phi, &sigma, params, potential)?;
    let converged = converged && r1 + r2 < tol.max(1e-8);
    Ok(EquilibriumResult {
        separation: 1.0 - phi.norm_linf(),
        phi_inf: phi,
        sigma_inf: sigma,
        energy: energy_full,
        residual: r1 + r2,
        iterations,
        converged,
    })
}

/// A random admissible field: iid noise of the given amplitude around the
/// mean, smoothed by two screened-Poisson passes, mean re-projected.
pub fn random_smooth_field(
    grid: Grid,
    seed: u64,
    amplitude: f64,
    smoothing_passes: u32,
    mean: f64,
) -> ScalarField {
    let mut rng = SplitMix64::new(seed);
    let mut f = ScalarField::from_fn(grid, |_, _, _| amplitude * rng.next_symm());
    let h = (0..grid.dim())
        .map(|a| grid.spacing()[a])
        .fold(f64::INFINITY, f64::min);
    let plan = crate::spectral::plan_for(&grid);
    for _ in 0..smoothing_passes {
        f = plan
            .solve_helmholtz(&f, 1.0, h * h)
            .expect("screened smoothing is always solvable");
    }
    f.set_mean(mean);
    f
}

/// Outcome of the multi-start minimization.
#[derive(Debug, Clone)]
pub struct MinimizeReport {
    pub best: EquilibriumResult,
    pub candidates: Vec<EquilibriumResult>,
}

/// Worker-thread cap: `CHNS_THREADS` when set, otherwise the machine default.
pub fn worker_count(n_tasks: usize) -> usize {
    let hw = std::env::var("CHNS_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    hw.max(1).min(n_tasks.max(1))
}

/// Multi-start minimization of the free energy over the constraint class
/// with means (m1, m2): one uniform start plus seeded random perturbations,
/// each equilibrated by `cho_flow`; the lowest-energy candidate wins.
/// Non-converged candidates are kept in the report but never win over a
/// converged one.
pub fn minimize_energy(
    grid: Grid,
    m1: f64,
    m2: f64,
    params: &PhysParams,
    potential: &PotentialSpec,
    n_starts: usize,
    seed: u64,
    opts: &FlowOptions,
) -> Result<MinimizeReport> {
    if !(m1 > -1.0 && m1 < 1.0) {
        return Err(Error::Grid(format!("m1 must lie in (-1, 1), got {m1}")));
    }
    let n_starts = n_starts.max(1);
    let make_start = |i: usize| -> (ScalarField, ScalarField) {
        if i == 0 {
            (
                ScalarField::constant(grid, m1),
                ScalarField::constant(grid, m2),
            )
        } else {
            let amp = 0.1f64.min(0.5 * (1.0 - m1.abs()));
            let phi = random_smooth_field(grid, seed.wrapping_add(i as u64), amp, 2, m1);
            let sigma = random_smooth_field(grid, seed.wrapping_add(1000 + i as u64), amp, 2, m2);
            (phi, sigma)
        }
    };

    let workers = worker_count(n_starts);
    let results: Vec<Option<Result<EquilibriumResult>>> = {
        let mut slots: Vec<Option<Result<EquilibriumResult>>> =
            (0..n_starts).map(|_| None).collect();
        if workers <= 1 {
            for (i, slot) in slots.iter_mut().enumerate() {
                let (phi, sigma) = make_start(i);
                *slot = Some(cho_flow(&phi, &sigma, params, potential, opts));
            }
        } else {
            let slots_mutex = std::sync::Mutex::new(&mut slots);
            let next = std::sync::atomic::AtomicUsize::new(0);
            std::thread::scope(|scope| {
                for _ in 0..workers {
                    scope.spawn(|| loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if i >= n_starts {
                            break;
                        }
                        let (phi, sigma) = make_start(i);
                        let res = cho_flow(&phi, &sigma, params, potential, opts);
                        let mut guard = slots_mutex.lock().unwrap();
                        guard[i] = Some(res);
                    });
                }
            });
        }
        slots
    };

    let mut candidates = Vec::with_capacity(n_starts);
    for (i, r) in results.into_iter().enumerate() {
        match r.expect("every start produces a result") {
            Ok(eq) => {
                if !eq.converged {
                    eprintln!(
                        "minimize_energy: start {i} did not converge (residual {:.3e}); excluded from ranking",
                        eq.residual
                    );
                }
                candidates.push(eq);
            }
            Err(e) => {
                eprintln!("minimize_energy: start {i} failed: {e}");
            }
        }
    }
    if candidates.is_empty() {
        return Err(Error::Solver {
            what: "minimize_energy (all starts failed)",
            residual: f64::NAN,
            iterations: 0,
        });
    }
    // converged candidates rank; the non-converged are only a fallback
    let best = candidates
        .iter()
        .filter(|c| c.converged)
        .min_by(|a, b| a.energy.partial_cmp(&b.energy).unwrap())
        .or_else(|| {
            candidates
                .iter()
                .min_by(|a, b| a.energy.partial_cmp(&b.energy).unwrap())
        })
        .expect("candidates nonempty")
        .clone();
    Ok(MinimizeReport { best, candidates })
}
