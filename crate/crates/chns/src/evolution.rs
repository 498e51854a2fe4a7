//! Coupled semi-implicit time stepper.
//!
//! One step advances phi -> sigma -> velocity:
//!
//! ```text
//! (phi' - phi)/dt + div(v phi) = lap mu' - alpha (mean(phi') - c0)
//! mu' = gamma (phi' - phi)/dt - lap phi' + S (phi' - phi)
//!       + Psi'(phi) - chi sigma + beta N(phi - mean(phi))
//! (sig' - sig)/dt + div(v sig) = lap sig' - chi lap phi'
//! (u* - v)/dt + div(v x v) = div(2 nu(phi') D u*) + (mu' + chi sig') grad phi'
//! v' = P u*,   p' = q / dt
//! ```
//!
//! The nonlinearity Psi' is explicit with the linear stabilization
//! S (phi' - phi); the fourth-order implicit system is constant-coefficient
//! and is solved exactly in the cosine eigenbasis. The discrete mean of phi
//! then obeys exactly `mean' = (mean + dt alpha c0) / (1 + dt alpha)` and
//! the mean of sigma is conserved.

use crate::error::{Error, Result};
use crate::grid::{Grid, PhysParams, ScalarField, VectorField};
use crate::operators::{self, LinearSolveConfig};
use crate::potentials::{self, PotentialSpec};

/// Full time-step state.
#[derive(Debug, Clone)]
pub struct SimState {
    pub v: VectorField,
    pub p: ScalarField,
    pub phi: ScalarField,
    pub mu: ScalarField,
    pub sigma: ScalarField,
    pub t: f64,
    pub step: u64,
    /// Initial means, cached for the mass laws.
    pub phi_mean0: f64,
    pub sigma_mean0: f64,
    /// Exact discrete mean recurrence, advanced with the dt actually used.
    pub phi_mean_recurrence: f64,
    /// Cumulative count of potential-evaluation clamps.
    pub clip_events: u64,
}

impl SimState {
    /// Assemble a state from initial fields. The velocity is projected to the
    /// divergence-free space, and `mu` is initialized to the chemical
    /// potential of `(phi, sigma)`.
    pub fn new(
        v0: VectorField,
        phi0: ScalarField,
        sigma0: ScalarField,
        params: &PhysParams,
        potential: &PotentialSpec,
    ) -> Result<Self> {
        if phi0.grid != sigma0.grid || phi0.grid != v0.grid {
            return Err(Error::GridMismatch);
        }
        if !phi0.is_finite() || !sigma0.is_finite() || !v0.is_finite() {
            return Err(Error::NonFinite("initial data"));
        }
        if potential.is_singular() && phi0.norm_linf() >= 1.0 {
            return Err(Error::SeparationViolation {
                min_separation: 1.0 - phi0.norm_linf(),
                step: 0,
            });
        }
        let mut v = v0;
        v.enforce_noslip();
        let v = operators::leray_project(&v)?;
        let mu = chemical_potential(&phi0, &sigma0, params, potential)?;
        let phi_mean0 = phi0.mean();
        let sigma_mean0 = sigma0.mean();
        let p = ScalarField::zeros(phi0.grid);
        Ok(Self {
            v,
            p,
            phi: phi0,
            mu,
            sigma: sigma0,
            t: 0.0,
            step: 0,
            phi_mean0,
            sigma_mean0,
            phi_mean_recurrence: phi_mean0,
            clip_events: 0,
        })
    }

    pub fn grid(&self) -> Grid {
        self.phi.grid
    }
}

/// Time-stepper configuration.
#[derive(Debug, Clone)]
pub struct StepperConfig {
    pub dt: f64,
    /// Linear stabilization coefficient S.
    pub stabilization: f64,
    /// Viscous Cahn-Hilliard regularization (extra gamma d_t phi in mu).
    pub gamma: f64,
    pub potential: PotentialSpec,
    pub params: PhysParams,
    pub linear: LinearSolveConfig,
    /// Hard floor on 1 - ||phi||_inf for singular potentials; a step that
    /// lands below it is retried once at dt/2, then errors.
    pub clip_floor: f64,
    /// Divergence check threshold after projection.
    pub projection_tol: f64,
    /// Skip the velocity update, keeping v frozen at zero.
    pub freeze_velocity: bool,
    /// For the singular potential, grow S with the range the field actually
    /// visits; `stabilization` then acts as a floor.
    pub adaptive_stabilization: bool,
}

impl StepperConfig {
    pub fn new(dt: f64, potential: PotentialSpec, params: PhysParams) -> Self {
        Self {
            dt,
            stabilization: default_stabilization(&potential),
            gamma: params.gamma,
            potential,
            params,
            linear: LinearSolveConfig::default(),
            clip_floor: 1e-6,
            projection_tol: 1e-9,
            freeze_velocity: false,
            adaptive_stabilization: potential.is_singular(),
        }
    }

    /// Effective stabilization for a step starting from `phi`. The reference
    /// point sits halfway between the field's sup and the pure phase, so the
    /// bound covers moderate overshoot of the new iterate.
    fn effective_stabilization(&self, phi: &ScalarField) -> f64 {
        if !(self.adaptive_stabilization && self.potential.is_singular()) {
            return self.stabilization;
        }
        let rmax = phi.norm_linf().min(1.0 - self.potential.clip_delta);
        let r_ref = (0.5 * (1.0 + rmax)).min(1.0 - self.potential.clip_delta);
        let curv = self.potential.theta / (1.0 - r_ref * r_ref) - self.potential.theta0;
        (0.5 * curv + 0.5 * self.potential.theta0).max(self.stabilization)
    }
}

/// Default stabilization: half the largest curvature of the potential over
/// the range the run is expected to visit, plus theta0/2 for the singular
/// potential. For Flory-Huggins the curvature is taken on
/// [-1 + 0.05, 1 - 0.05]; the evaluation guard (clip_delta ~ 1e-9) would give
/// an astronomically large S that freezes the dynamics.
pub fn default_stabilization(potential: &PotentialSpec) -> f64 {
    match potential.kind {
        crate::potentials::PotentialKind::Quartic => 1.0,
        crate::potentials::PotentialKind::FloryHuggins => {
            let rim = 0.95;
            let max_curv = potential.theta / (1.0 - rim * rim) - potential.theta0;
            0.5 * max_curv + 0.5 * potential.theta0
        }
    }
}

/// The chemical potential of the continuous model (no gamma or S terms):
/// `mu = -lap phi + Psi'(phi) - chi sigma + beta N(phi - mean(phi))`.
pub fn chemical_potential(
    phi: &ScalarField,
    sigma: &ScalarField,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<ScalarField> {
    let (psi_p, _) = potential.psi_prime_field(phi)?;
    let lap = operators::laplacian_neumann(phi);
    let mut mu = psi_p;
    mu.add_scaled(&lap, -1.0);
    mu.add_scaled(sigma, -params.chi);
    if params.beta != 0.0 {
        let n = nonlocal_term(phi)?;
        mu.add_scaled(&n, params.beta);
    }
    Ok(mu)
}

/// `N(phi - mean(phi))`, solved exactly in the cosine basis.
pub fn nonlocal_term(phi: &ScalarField) -> Result<ScalarField> {
    let plan = crate::spectral::plan_for(&phi.grid);
    let mut f = phi.clone();
    f.set_mean(0.0);
    Ok(plan.solve_poisson_zero_mean(&f))
}

/// Outcome bookkeeping for a single step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub dt_used: f64,
    pub halved: bool,
    pub clip_events: u64,
    pub cfl: f64,
    pub cfl_warning: bool,
}

/// Phase sub-step. Returns `(phi_next, mu_next, clip_count)`.
pub fn step_phase(
    state: &SimState,
    cfg: &StepperConfig,
) -> Result<(ScalarField, ScalarField, u64)> {
    step_phase_dt(state, cfg, cfg.dt)
}

fn step_phase_dt(
    state: &SimState,
    cfg: &StepperConfig,
    dt: f64,
) -> Result<(ScalarField, ScalarField, u64)> {
    let params = &cfg.params;
    let c = cfg.gamma / dt + cfg.effective_stabilization(&state.phi);

    // explicit part of mu: Psi'(phi) - chi sigma + beta N(phi - mean)
    let (mut explicit, clips) = cfg.potential.psi_prime_field(&state.phi)?;
    explicit.add_scaled(&state.sigma, -params.chi);
    if params.beta != 0.0 {
        let n = nonlocal_term(&state.phi)?;
        explicit.add_scaled(&n, params.beta);
    }
    // g = -c phi + explicit
    let mut g = explicit.clone();
    g.add_scaled(&state.phi, -c);

    // rhs = phi/dt - div(v phi) + lap g + alpha c0
    let mut rhs = operators::laplacian_neumann(&g);
    rhs.add_scaled(&state.phi, 1.0 / dt);
    if !cfg.freeze_velocity {
        let conv = operators::convect(&state.v, &state.phi);
        rhs.add_scaled(&conv, -1.0);
    }
    rhs.shift(params.alpha * params.c0);

    // exact mean recurrence, then the zero-mean fourth-order solve
    let new_mean = (state.phi.mean() + dt * params.alpha * params.c0) / (1.0 + dt * params.alpha);
    rhs.set_mean(0.0);
    let plan = crate::spectral::plan_for(&state.grid());
    let mut phi_next = plan.solve_poly2_zero_mean(&rhs, 1.0 / dt, c, 1.0);
    phi_next.shift(new_mean);

    // mu' = c (phi' - phi) - lap phi' + explicit
    let lap_next = operators::laplacian_neumann(&phi_next);
    let mut mu_next = explicit;
    mu_next.add_scaled(&phi_next, c);
    mu_next.add_scaled(&state.phi, -c);
    mu_next.add_scaled(&lap_next, -1.0);

    Ok((phi_next, mu_next, clips as u64))
}

/// Chemical-density sub-step with implicit diffusion and the fully updated
/// phi in the active-transport term. Conserves `mean(sigma)` exactly.
pub fn step_sigma(
    state: &SimState,
    phi_next: &ScalarField,
    cfg: &StepperConfig,
) -> Result<ScalarField> {
    step_sigma_dt(state, phi_next, cfg, cfg.dt)
}

fn step_sigma_dt(
    state: &SimState,
    phi_next: &ScalarField,
    cfg: &StepperConfig,
    dt: f64,
) -> Result<ScalarField> {
    let chi = cfg.params.chi;
    let mut rhs = state.sigma.clone();
    rhs.scale(1.0 / dt);
    if !cfg.freeze_velocity {
        let conv = operators::convect(&state.v, &state.sigma);
        rhs.add_scaled(&conv, -1.0);
    }
    if chi != 0.0 {
        let lap_phi = operators::laplacian_neumann(phi_next);
        rhs.add_scaled(&lap_phi, -chi);
    }
    let plan = crate::spectral::plan_for(&state.grid());
    let mut sigma_next = plan.solve_helmholtz(&rhs, 1.0 / dt, 1.0)?;
    sigma_next.set_mean(state.sigma.mean());
    Ok(sigma_next)
}

/// Conservative momentum advection `div(v x v)` on the MAC grid with centered
/// averages; wall fluxes vanish under no-slip.
pub fn momentum_advection(u: &VectorField) -> VectorField {
    let grid = u.grid;
    let dims = grid.dims();
    let h = grid.spacing();
    let dim = grid.dim();
    let mut out = VectorField::zeros(grid);
    for a in 0..dim {
        let fd = grid.face_dims(a);
        for iz in 0..fd[2] {
            for iy in 0..fd[1] {
                for ix in 0..fd[0] {
                    let fa = [ix, iy, iz];
                    // interior faces only
                    if fa[a] == 0 || fa[a] == dims[a] {
                        continue;
                    }
                    let mut acc = 0.0;
                    // flux of u_a u_a across the two adjacent cells along a
                    for (side, sign) in [(0usize, -1.0), (1usize, 1.0)] {
                        // cell index along a: fa[a]-1 (side 0) or fa[a] (side 1)
                        let cell_a = fa[a] - 1 + side;
                        let f_lo = {
                            let mut j = fa;
                            j[a] = cell_a;
                            grid.face_idx(a, j[0], j[1], j[2])
                        };
                        let f_hi = {
                            let mut j = fa;
                            j[a] = cell_a + 1;
                            grid.face_idx(a, j[0], j[1], j[2])
                        };
                        let ubar = 0.5 * (u.comp(a)[f_lo] + u.comp(a)[f_hi]);
                        acc += sign * ubar * ubar / h[a];
                    }
                    // shear fluxes u_b u_a at the (a, b) edges
                    for b in 0..dim {
                        if b == a {
                            continue;
                        }
                        for (side, sign) in [(0usize, -1.0), (1usize, 1.0)] {
                            // edge at b-level fa[b] + side
                            let eb = fa[b] + side;
                            if eb == 0 || eb == dims[b] {
                                continue; // wall edge: no-slip flux is zero
                            }
                            // advecting velocity: average of u_b over the two
                            // cells adjacent along a
                            let mut j = fa;
                            j[b] = eb;
                            j[a] = fa[a] - 1;
                            let vb_lo = u.comp(b)[grid.face_idx(b, j[0], j[1], j[2])];
                            j[a] = fa[a];
                            let vb_hi = u.comp(b)[grid.face_idx(b, j[0], j[1], j[2])];
                            let vbar = 0.5 * (vb_lo + vb_hi);
                            // transported u_a averaged along b
                            let mut k = fa;
                            k[b] = eb - 1;
                            let ua_lo = u.comp(a)[grid.face_idx(a, k[0], k[1], k[2])];
                            k[b] = eb;
                            let ua_hi = u.comp(a)[grid.face_idx(a, k[0], k[1], k[2])];
                            let ubar = 0.5 * (ua_lo + ua_hi);
                            acc += sign * vbar * ubar / h[b];
                        }
                    }
                    out.comp_mut(a)[grid.face_idx(a, ix, iy, iz)] = acc;
                }
            }
        }
    }
    out
}

/// Capillary force `(mu + chi sigma) grad(phi)` at faces, with the scalar
/// prefactor interpolated by centered averages.
pub fn capillary_force(
    mu: &ScalarField,
    sigma: &ScalarField,
    phi: &ScalarField,
    chi: f64,
) -> VectorField {
    let grid = phi.grid;
    let mut pref = mu.clone();
    pref.add_scaled(sigma, chi);
    let gphi = operators::gradient(phi);
    let mut out = VectorField::zeros(grid);
    let dims = grid.dims();
    for a in 0..grid.dim() {
        let fd = grid.face_dims(a);
        for iz in 0..fd[2] {
            for iy in 0..fd[1] {
                for ix in 0..fd[0] {
                    let fa = [ix, iy, iz];
                    if fa[a] == 0 || fa[a] == dims[a] {
                        continue;
                    }
                    let mut left = fa;
                    left[a] -= 1;
                    let pl = pref.values[grid.idx(left[0], left[1], left[2])];
                    let pr = pref.values[grid.idx(
                        fa[0].min(dims[0] - 1),
                        fa[1].min(dims[1] - 1),
                        fa[2].min(dims[2] - 1),
                    )];
                    let fidx = grid.face_idx(a, ix, iy, iz);
                    out.comp_mut(a)[fidx] = 0.5 * (pl + pr) * gphi.comp(a)[fidx];
                }
            }
        }
    }
    out
}

/// Velocity sub-step: explicit advection, implicit variable viscosity,
/// capillary forcing, Chorin projection. Returns `(v_next, p_next)`.
pub fn step_velocity(
    state: &SimState,
    phi_next: &ScalarField,
    mu_next: &ScalarField,
    sigma_next: &ScalarField,
    cfg: &StepperConfig,
) -> Result<(VectorField, ScalarField)> {
    step_velocity_dt(state, phi_next, mu_next, sigma_next, cfg, cfg.dt)
}

fn step_velocity_dt(
    state: &SimState,
    phi_next: &ScalarField,
    mu_next: &ScalarField,
    sigma_next: &ScalarField,
    cfg: &StepperConfig,
    dt: f64,
) -> Result<(VectorField, ScalarField)> {
    let params = &cfg.params;
    let mut rhs = state.v.clone();
    let adv = momentum_advection(&state.v);
    rhs.add_scaled(&adv, -dt);
    let force = capillary_force(mu_next, sigma_next, phi_next, params.chi);
    rhs.add_scaled(&force, dt);
    rhs.enforce_noslip();

    let nu = phi_next.map(|r| potentials::viscosity(params.nu1, params.nu2, r));
    let u_star = operators::momentum_viscous_solve(&rhs, &nu, dt, &cfg.linear)?;
    let (v_next, q) = operators::leray_project_with_potential(&u_star)?;
    let mut p_next = q;
    p_next.scale(1.0 / dt);
    p_next.set_mean(0.0);
    Ok((v_next, p_next))
}

fn try_step(state: &SimState, cfg: &StepperConfig, dt: f64) -> Result<(SimState, u64)> {
    let (phi_next, mu_next, clips) = step_phase_dt(state, cfg, dt)?;
    if cfg.potential.is_singular() {
        let sep = 1.0 - phi_next.norm_linf();
        if sep <= cfg.clip_floor {
            return Err(Error::SeparationViolation {
                min_separation: sep,
                step: state.step + 1,
            });
        }
    }
    let sigma_next = step_sigma_dt(state, &phi_next, cfg, dt)?;
    let (v_next, p_next) = if cfg.freeze_velocity {
        (state.v.clone(), state.p.clone())
    } else {
        step_velocity_dt(state, &phi_next, &mu_next, &sigma_next, cfg, dt)?
    };
    let mut next = state.clone();
    next.phi = phi_next;
    next.mu = mu_next;
    next.sigma = sigma_next;
    next.v = v_next;
    next.p = p_next;
    next.t = state.t + dt;
    next.step = state.step + 1;
    next.clip_events = state.clip_events + clips;
    next.phi_mean_recurrence = (state.phi_mean_recurrence + dt * cfg.params.alpha * cfg.params.c0)
        / (1.0 + dt * cfg.params.alpha);
    Ok((next, clips))
}

/// Advance one step. A separation violation under a singular potential is
/// retried once at dt/2; a second failure is a hard error. The report
/// carries the dt actually used.
pub fn step(state: &mut SimState, cfg: &StepperConfig) -> Result<StepReport> {
    let hmin = (0..state.grid().dim())
        .map(|a| state.grid().spacing()[a])
        .fold(f64::INFINITY, f64::min);
    let cfl = state.v.max_abs() * cfg.dt / hmin;
    let cfl_warning = cfl > 0.8;

    let attempt = try_step(state, cfg, cfg.dt);
    let (next, clips, dt_used, halved) = match attempt {
        Ok((next, clips)) => (next, clips, cfg.dt, false),
        Err(Error::SeparationViolation { .. }) => {
            let dt_half = cfg.dt * 0.5;
            let (next, clips) = try_step(state, cfg, dt_half)?;
            (next, clips, dt_half, true)
        }
        Err(e) => return Err(e),
    };

    if !next.phi.is_finite() || !next.sigma.is_finite() || !next.v.is_finite() {
        return Err(Error::NonFinite("state after step"));
    }
    if !cfg.freeze_velocity {
        let div = operators::divergence(&next.v);
        let scale = (next.v.max_abs() / hmin).max(1.0);
        if div.norm_linf() > 10.0 * cfg.projection_tol * scale {
            return Err(Error::Solver {
                what: "projection (divergence check)",
                residual: div.norm_linf(),
                iterations: 0,
            });
        }
    }
    *state = next;
    Ok(StepReport {
        dt_used,
        halved,
        clip_events: clips,
        cfl,
        cfl_warning,
    })
}

/// Drive the stepper until `t_end` (or `max_steps`). The callback fires after
/// every step; returning `false` stops the run early.
pub fn run(
    state: &mut SimState,
    cfg: &StepperConfig,
    t_end: f64,
    max_steps: u64,
    mut on_step: impl FnMut(&SimState, &StepReport) -> Result<bool>,
) -> Result<u64> {
    let mut steps = 0u64;
    while state.t < t_end - 1e-12 && steps < max_steps {
        let report = step(state, cfg)?;
        steps += 1;
        if !on_step(state, &report)? {
            break;
        }
    }
    Ok(steps)
}
