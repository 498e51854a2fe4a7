//! Run configuration: `key = value` lines with `#` comments and dotted
//! section prefixes. Unknown keys are errors, so typos cannot silently fall
//! back to defaults.

use crate::error::{Error, Result};
use crate::evolution::StepperConfig;
use crate::grid::{Grid, PhysParams};
use crate::operators::{LinearSolveConfig, SolveMethod};
use crate::potentials::{PotentialKind, PotentialSpec};
use std::collections::BTreeMap;
use std::path::Path;

/// How the initial fields are produced.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSpec {
    Uniform,
    Random {
        seed: u64,
        amplitude: f64,
        smoothing: u32,
    },
    /// Load a checkpoint file verbatim.
    File {
        path: String,
    },
    /// Load an equilibrium checkpoint and perturb it.
    PerturbedEquilibrium {
        path: String,
        amplitude: f64,
        v_amplitude: f64,
        seed: u64,
    },
}

/// Fully validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub grid_dims: Vec<usize>,
    pub grid_lengths: Vec<f64>,
    pub params: PhysParams,
    pub potential_kind: PotentialKind,
    pub clip_delta: f64,
    pub dt: f64,
    /// None = use the prescribed default for the potential.
    pub stabilization: Option<f64>,
    pub clip_floor: f64,
    pub linear: LinearSolveConfig,
    pub init: InitSpec,
    pub phi_mean: f64,
    pub sigma_mean: f64,
    pub t_end: f64,
    pub max_steps: u64,
    pub out_dir: String,
    pub csv_every: u64,
    pub snapshot_every: u64,
    pub checkpoint_every: u64,
    /// Monitor coefficient a1 for the Lambda diagnostic.
    pub a1: f64,
    // equilibration workflow
    pub equil_tol: f64,
    pub equil_max_steps: u64,
    pub equil_n_starts: usize,
    pub equil_seed: u64,
    pub equil_dt: f64,
    pub equil_gamma: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            grid_dims: vec![64, 64],
            grid_lengths: vec![1.0, 1.0],
            params: PhysParams::default(),
            potential_kind: PotentialKind::Quartic,
            clip_delta: 1e-9,
            dt: 1e-3,
            stabilization: None,
            clip_floor: 1e-6,
            linear: LinearSolveConfig::default(),
            init: InitSpec::Uniform,
            phi_mean: 0.0,
            sigma_mean: 0.0,
            t_end: 1.0,
            max_steps: 10_000_000,
            out_dir: "out".into(),
            csv_every: 10,
            snapshot_every: 1000,
            checkpoint_every: 100_000,
            a1: 0.1,
            equil_tol: 1e-9,
            equil_max_steps: 400_000,
            equil_n_starts: 4,
            equil_seed: 1,
            equil_dt: 0.05,
            equil_gamma: 0.1,
        }
    }
}

impl RunConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.grid_dims, &self.grid_lengths)
    }

    pub fn potential(&self) -> Result<PotentialSpec> {
        let mut spec = match self.potential_kind {
            PotentialKind::Quartic => PotentialSpec::quartic(),
            PotentialKind::FloryHuggins => {
                PotentialSpec::flory_huggins(self.params.theta, self.params.theta0)?
            }
        };
        spec.clip_delta = self.clip_delta;
        Ok(spec)
    }

    pub fn stepper(&self) -> Result<StepperConfig> {
        let potential = self.potential()?;
        let mut cfg = StepperConfig::new(self.dt, potential, self.params);
        if let Some(s) = self.stabilization {
            cfg.stabilization = s;
            cfg.adaptive_stabilization = false;
        }
        cfg.clip_floor = self.clip_floor;
        cfg.linear = self.linear;
        Ok(cfg)
    }

    /// Canonical `key = value` dump; `parse(dump(c))` reproduces `c`.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let dim = self.grid_dims.len();
        s.push_str(&format!("grid.nx = {}\n", self.grid_dims[0]));
        s.push_str(&format!("grid.ny = {}\n", self.grid_dims[1]));
        if dim == 3 {
            s.push_str(&format!("grid.nz = {}\n", self.grid_dims[2]));
        }
        s.push_str(&format!("grid.lx = {:e}\n", self.grid_lengths[0]));
        s.push_str(&format!("grid.ly = {:e}\n", self.grid_lengths[1]));
        if dim == 3 {
            s.push_str(&format!("grid.lz = {:e}\n", self.grid_lengths[2]));
        }
        s.push_str(&format!(
            "potential.kind = {}\n",
            match self.potential_kind {
                PotentialKind::FloryHuggins => "flory_huggins",
                PotentialKind::Quartic => "quartic",
            }
        ));
        s.push_str(&format!("potential.clip_delta = {:e}\n", self.clip_delta));
        let p = &self.params;
        s.push_str(&format!("params.nu1 = {:e}\n", p.nu1));
        s.push_str(&format!("params.nu2 = {:e}\n", p.nu2));
        s.push_str(&format!("params.chi = {:e}\n", p.chi));
        s.push_str(&format!("params.alpha = {:e}\n", p.alpha));
        s.push_str(&format!("params.beta = {:e}\n", p.beta));
        s.push_str(&format!("params.c0 = {:e}\n", p.c0));
        s.push_str(&format!("params.theta = {:e}\n", p.theta));
        s.push_str(&format!("params.theta0 = {:e}\n", p.theta0));
        s.push_str(&format!("params.gamma = {:e}\n", p.gamma));
        s.push_str(&format!("stepper.dt = {:e}\n", self.dt));
        match self.stabilization {
            Some(v) => s.push_str(&format!("stepper.stabilization = {v:e}\n")),
            None => s.push_str("stepper.stabilization = auto\n"),
        }
        s.push_str(&format!("stepper.clip_floor = {:e}\n", self.clip_floor));
        s.push_str(&format!(
            "linear.method = {}\n",
            match self.linear.method {
                SolveMethod::ConjugateGradient => "cg",
                SolveMethod::DirectDense => "dense",
            }
        ));
        s.push_str(&format!("linear.tol = {:e}\n", self.linear.tol));
        s.push_str(&format!("linear.max_iter = {}\n", self.linear.max_iter));
        match &self.init {
            InitSpec::Uniform => s.push_str("init.kind = uniform\n"),
            InitSpec::Random {
                seed,
                amplitude,
                smoothing,
            } => {
                s.push_str("init.kind = random\n");
                s.push_str(&format!("init.seed = {seed}\n"));
                s.push_str(&format!("init.amplitude = {amplitude:e}\n"));
                s.push_str(&format!("init.smoothing = {smoothing}\n"));
            }
            InitSpec::File { path } => {
                s.push_str("init.kind = file\n");
                s.push_str(&format!("init.file = {path}\n"));
            }
            InitSpec::PerturbedEquilibrium {
                path,
                amplitude,
                v_amplitude,
                seed,
            } => {
                s.push_str("init.kind = perturbed_equilibrium\n");
                s.push_str(&format!("init.file = {path}\n"));
                s.push_str(&format!("init.amplitude = {amplitude:e}\n"));
                s.push_str(&format!("init.v_amplitude = {v_amplitude:e}\n"));
                s.push_str(&format!("init.seed = {seed}\n"));
            }
        }
        s.push_str(&format!("init.phi_mean = {:e}\n", self.phi_mean));
        s.push_str(&format!("init.sigma_mean = {:e}\n", self.sigma_mean));
        s.push_str(&format!("run.t_end = {:e}\n", self.t_end));
        s.push_str(&format!("run.max_steps = {}\n", self.max_steps));
        s.push_str(&format!("output.dir = {}\n", self.out_dir));
        s.push_str(&format!("output.csv_every = {}\n", self.csv_every));
        s.push_str(&format!(
            "output.snapshot_every = {}\n",
            self.snapshot_every
        ));
        s.push_str(&format!(
            "output.checkpoint_every = {}\n",
            self.checkpoint_every
        ));
        s.push_str(&format!("diagnostics.a1 = {:e}\n", self.a1));
        s.push_str(&format!("equilibrate.tol = {:e}\n", self.equil_tol));
        s.push_str(&format!(
            "equilibrate.max_steps = {}\n",
            self.equil_max_steps
        ));
        s.push_str(&format!("equilibrate.n_starts = {}\n", self.equil_n_starts));
        s.push_str(&format!("equilibrate.seed = {}\n", self.equil_seed));
        s.push_str(&format!("equilibrate.dt = {:e}\n", self.equil_dt));
        s.push_str(&format!("equilibrate.gamma = {:e}\n", self.equil_gamma));
        s
    }
}

struct RawEntry {
    line: usize,
    value: String,
    used: bool,
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::Config {
        line,
        msg: format!("cannot parse `{v}` as a value for `{key}`"),
    })
}

/// Parse and validate a config text.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: BTreeMap<String, RawEntry> = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw_line.find('#') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config {
                line: line_no,
                msg: "empty key or value".into(),
            });
        }
        if entries.contains_key(&key) {
            return Err(Error::Config {
                line: line_no,
                msg: format!("duplicate key `{key}`"),
            });
        }
        entries.insert(
            key,
            RawEntry {
                line: line_no,
                value,
                used: false,
            },
        );
    }

    let mut cfg = RunConfig::default();
    let mut take = |key: &str| -> Option<(usize, String)> {
        entries.get_mut(key).map(|e| {
            e.used = true;
            (e.line, e.value.clone())
        })
    };

    // grid
    let mut nx = 64usize;
    let mut ny = 64usize;
    let mut nz: Option<usize> = None;
    let mut lx = 1.0f64;
    let mut ly = 1.0f64;
    let mut lz: Option<f64> = None;
    if let Some((l, v)) = take("grid.nx") {
        nx = parse_num(l, "grid.nx", &v)?;
    }
    if let Some((l, v)) = take("grid.ny") {
        ny = parse_num(l, "grid.ny", &v)?;
    }
    if let Some((l, v)) = take("grid.nz") {
        nz = Some(parse_num(l, "grid.nz", &v)?);
    }
    if let Some((l, v)) = take("grid.lx") {
        lx = parse_num(l, "grid.lx", &v)?;
    }
    if let Some((l, v)) = take("grid.ly") {
        ly = parse_num(l, "grid.ly", &v)?;
    }
    if let Some((l, v)) = take("grid.lz") {
        lz = Some(parse_num(l, "grid.lz", &v)?);
    }
    match (nz, lz) {
        (Some(n), Some(len)) => {
            cfg.grid_dims = vec![nx, ny, n];
            cfg.grid_lengths = vec![lx, ly, len];
        }
        (None, None) => {
            cfg.grid_dims = vec![nx, ny];
            cfg.grid_lengths = vec![lx, ly];
        }
        _ => {
            return Err(Error::Config {
                line: 0,
                msg: "grid.nz and grid.lz must be given together".into(),
            })
        }
    }

    // potential
    if let Some((l, v)) = take("potential.kind") {
        cfg.potential_kind = match v.as_str() {
            "flory_huggins" | "flory-huggins" | "logarithmic" => PotentialKind::FloryHuggins,
            "quartic" | "polynomial" => PotentialKind::Quartic,
            other => {
                return Err(Error::Config {
                    line: l,
                    msg: format!("unknown potential kind `{other}` (flory_huggins | quartic)"),
                })
            }
        };
    }
    if let Some((l, v)) = take("potential.clip_delta") {
        cfg.clip_delta = parse_num(l, "potential.clip_delta", &v)?;
        if !(cfg.clip_delta > 0.0 && cfg.clip_delta < 0.5) {
            return Err(Error::Config {
                line: l,
                msg: format!("clip_delta must lie in (0, 0.5), got {}", cfg.clip_delta),
            });
        }
    }

    // params
    macro_rules! param {
        ($key:literal, $field:ident) => {
            if let Some((l, v)) = take($key) {
                cfg.params.$field = parse_num(l, $key, &v)?;
            }
        };
    }
    param!("params.nu1", nu1);
    param!("params.nu2", nu2);
    param!("params.chi", chi);
    param!("params.alpha", alpha);
    param!("params.beta", beta);
    param!("params.c0", c0);
    param!("params.theta", theta);
    param!("params.theta0", theta0);
    param!("params.gamma", gamma);

    // stepper
    if let Some((l, v)) = take("stepper.dt") {
        cfg.dt = parse_num(l, "stepper.dt", &v)?;
        if !(cfg.dt > 0.0) {
            return Err(Error::Config {
                line: l,
                msg: format!("dt must be positive, got {}", cfg.dt),
            });
        }
    }
    if let Some((l, v)) = take("stepper.stabilization") {
        if v == "auto" {
            cfg.stabilization = None;
        } else {
            let s: f64 = parse_num(l, "stepper.stabilization", &v)?;
            if s < 0.0 {
                return Err(Error::Config {
                    line: l,
                    msg: format!("stabilization must be >= 0, got {s}"),
                });
            }
            cfg.stabilization = Some(s);
        }
    }
    if let Some((l, v)) = take("stepper.clip_floor") {
        cfg.clip_floor = parse_num(l, "stepper.clip_floor", &v)?;
    }

    // linear solver
    if let Some((l, v)) = take("linear.method") {
        cfg.linear.method = match v.as_str() {
            "cg" | "conjugate_gradient" => SolveMethod::ConjugateGradient,
            "dense" | "direct" | "direct_dense" => SolveMethod::DirectDense,
            other => {
                return Err(Error::Config {
                    line: l,
                    msg: format!("unknown linear method `{other}` (cg | dense)"),
                })
            }
        };
    }
    if let Some((l, v)) = take("linear.tol") {
        cfg.linear.tol = parse_num(l, "linear.tol", &v)?;
        if !(cfg.linear.tol > 0.0 && cfg.linear.tol < 1.0) {
            return Err(Error::Config {
                line: l,
                msg: format!("linear.tol must lie in (0, 1), got {}", cfg.linear.tol),
            });
        }
    }
    if let Some((l, v)) = take("linear.max_iter") {
        cfg.linear.max_iter = parse_num(l, "linear.max_iter", &v)?;
    }

    // initial condition
    let init_kind = take("init.kind");
    let init_file = take("init.file");
    let init_seed = take("init.seed");
    let init_amplitude = take("init.amplitude");
    let init_v_amplitude = take("init.v_amplitude");
    let init_smoothing = take("init.smoothing");
    if let Some((l, v)) = take("init.phi_mean") {
        cfg.phi_mean = parse_num(l, "init.phi_mean", &v)?;
    }
    if let Some((l, v)) = take("init.sigma_mean") {
        cfg.sigma_mean = parse_num(l, "init.sigma_mean", &v)?;
    }
    let kind_line = init_kind.as_ref().map(|(l, _)| *l).unwrap_or(0);
    let kind = init_kind
        .as_ref()
        .map(|(_, v)| v.as_str())
        .unwrap_or("uniform");
    let existing_file = |l: usize, path: &str| -> Result<String> {
        if Path::new(path).exists() {
            Ok(path.to_string())
        } else {
            Err(Error::Config {
                line: l,
                msg: format!("referenced file does not exist: {path}"),
            })
        }
    };
    cfg.init = match kind {
        "uniform" => InitSpec::Uniform,
        "random" => InitSpec::Random {
            seed: match &init_seed {
                Some((l, v)) => parse_num(*l, "init.seed", v)?,
                None => 1,
            },
            amplitude: match &init_amplitude {
                Some((l, v)) => parse_num(*l, "init.amplitude", v)?,
                None => 0.05,
            },
            smoothing: match &init_smoothing {
                Some((l, v)) => parse_num(*l, "init.smoothing", v)?,
                None => 2,
            },
        },
        "file" => {
            let (l, path) = init_file.clone().ok_or(Error::Config {
                line: kind_line,
                msg: "init.kind = file requires init.file".into(),
            })?;
            InitSpec::File {
                path: existing_file(l, &path)?,
            }
        }
        "perturbed_equilibrium" | "perturbed-equilibrium" => {
            let (l, path) = init_file.clone().ok_or(Error::Config {
                line: kind_line,
                msg: "init.kind = perturbed_equilibrium requires init.file".into(),
            })?;
            InitSpec::PerturbedEquilibrium {
                path: existing_file(l, &path)?,
                amplitude: match &init_amplitude {
                    Some((l, v)) => parse_num(*l, "init.amplitude", v)?,
                    None => 1e-3,
                },
                v_amplitude: match &init_v_amplitude {
                    Some((l, v)) => parse_num(*l, "init.v_amplitude", v)?,
                    None => 1e-3,
                },
                seed: match &init_seed {
                    Some((l, v)) => parse_num(*l, "init.seed", v)?,
                    None => 1,
                },
            }
        }
        other => {
            return Err(Error::Config {
                line: kind_line,
                msg: format!(
                    "unknown init kind `{other}` (uniform | random | file | perturbed_equilibrium)"
                ),
            })
        }
    };

    // run + output
    if let Some((l, v)) = take("run.t_end") {
        cfg.t_end = parse_num(l, "run.t_end", &v)?;
    }
    if let Some((l, v)) = take("run.max_steps") {
        cfg.max_steps = parse_num(l, "run.max_steps", &v)?;
    }
    if let Some((_, v)) = take("output.dir") {
        cfg.out_dir = v;
    }
    if let Some((l, v)) = take("output.csv_every") {
        cfg.csv_every = parse_cadence(l, "output.csv_every", &v)?;
    }
    if let Some((l, v)) = take("output.snapshot_every") {
        cfg.snapshot_every = parse_cadence(l, "output.snapshot_every", &v)?;
    }
    if let Some((l, v)) = take("output.checkpoint_every") {
        cfg.checkpoint_every = parse_cadence(l, "output.checkpoint_every", &v)?;
    }
    if let Some((l, v)) = take("diagnostics.a1") {
        cfg.a1 = parse_num(l, "diagnostics.a1", &v)?;
        if !(cfg.a1 > 0.0 && cfg.a1 < 1.0) {
            return Err(Error::Config {
                line: l,
                msg: format!("a1 must lie in (0, 1), got {}", cfg.a1),
            });
        }
    }

    // equilibrate workflow
    if let Some((l, v)) = take("equilibrate.tol") {
        cfg.equil_tol = parse_num(l, "equilibrate.tol", &v)?;
    }
    if let Some((l, v)) = take("equilibrate.max_steps") {
        cfg.equil_max_steps = parse_num(l, "equilibrate.max_steps", &v)?;
    }
    if let Some((l, v)) = take("equilibrate.n_starts") {
        cfg.equil_n_starts = parse_num(l, "equilibrate.n_starts", &v)?;
    }
    if let Some((l, v)) = take("equilibrate.seed") {
        cfg.equil_seed = parse_num(l, "equilibrate.seed", &v)?;
    }
    if let Some((l, v)) = take("equilibrate.dt") {
        cfg.equil_dt = parse_num(l, "equilibrate.dt", &v)?;
    }
    if let Some((l, v)) = take("equilibrate.gamma") {
        cfg.equil_gamma = parse_num(l, "equilibrate.gamma", &v)?;
    }

    // reject unknown keys
    for (key, entry) in &entries {
        if !entry.used {
            return Err(Error::Config {
                line: entry.line,
                msg: format!("unknown key `{key}`"),
            });
        }
    }

    // cross-field validation
    if cfg.potential_kind == PotentialKind::FloryHuggins
        && !(cfg.params.theta > 0.0 && cfg.params.theta < cfg.params.theta0)
    {
        let line = entries.get("params.theta").map(|e| e.line).unwrap_or(0);
        return Err(Error::Config {
            line,
            msg: format!(
                "the logarithmic potential requires theta < theta0, got theta = {}, theta0 = {}",
                cfg.params.theta, cfg.params.theta0
            ),
        });
    }
    if !(cfg.params.c0 > -1.0 && cfg.params.c0 < 1.0) {
        let line = entries.get("params.c0").map(|e| e.line).unwrap_or(0);
        return Err(Error::Config {
            line,
            msg: format!("c0 must lie in (-1, 1), got {}", cfg.params.c0),
        });
    }
    cfg.params.validate().map_err(|e| Error::Config {
        line: 0,
        msg: e.to_string(),
    })?;
    cfg.grid()?;
    cfg.potential()?;
    Ok(cfg)
}

fn parse_cadence(line: usize, key: &str, v: &str) -> Result<u64> {
    let n: u64 = parse_num(line, key, v)?;
    if n < 1 {
        return Err(Error::Config {
            line,
            msg: format!("{key} must be >= 1, got {n}"),
        });
    }
    Ok(n)
}
