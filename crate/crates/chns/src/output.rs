//! File formats: diagnostics CSV, VTK legacy snapshots, binary checkpoints.
//!
//! All formats are byte-deterministic for identical inputs; no timestamps or
//! environment data are embedded. Floats are serialized with 17 significant
//! digits so a round-trip through text is exact.

use crate::diagnostics::DiagnosticsRecord;
use crate::error::{Error, Result};
use crate::evolution::SimState;
use crate::grid::{Grid, PhysParams, ScalarField, VectorField};
use crate::potentials::PotentialSpec;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CSV_HEADER: &str = "t,step,E_total,F_free,D_diss,phi_mean,phi_mean_pred,phi_mean_err,\
sigma_mean,sigma_drift,separation,grad_mu,grad_sigchi,v_h1,lambda,energy_residual";

/// Write diagnostics rows with the fixed schema, LF line endings and
/// 17-significant-digit floats.
pub fn write_timeseries_csv(path: &Path, records: &[DiagnosticsRecord]) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_csv_to(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn write_csv_to(w: &mut impl Write, records: &[DiagnosticsRecord]) -> Result<()> {
    w.write_all(CSV_HEADER.as_bytes())?;
    w.write_all(b"\n")?;
    for r in records {
        writeln!(
            w,
            "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t,
            r.step,
            r.e_total,
            r.f_free,
            r.d_diss,
            r.phi_mean,
            r.phi_mean_pred,
            r.phi_mean_err,
            r.sigma_mean,
            r.sigma_drift,
            r.separation,
            r.grad_mu,
            r.grad_sigchi,
            r.v_h1,
            r.lambda,
            r.energy_residual
        )?;
    }
    Ok(())
}

/// Generic CSV reader: returns the header fields and all numeric rows.
/// `NaN` parses as NaN.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty CSV file".into()))??;
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| Error::Checkpoint(format!("bad CSV value: {e}")))?;
        if row.len() != cols.len() {
            return Err(Error::Checkpoint(format!(
                "CSV row has {} fields, header has {}",
                row.len(),
                cols.len()
            )));
        }
        rows.push(row);
    }
    Ok((cols, rows))
}

/// Parse a diagnostics CSV back into records.
pub fn read_timeseries_csv(path: &Path) -> Result<Vec<DiagnosticsRecord>> {
    let (cols, rows) = read_csv(path)?;
    let expected: Vec<&str> = CSV_HEADER.split(',').collect();
    if cols != expected {
        return Err(Error::Checkpoint(
            "CSV header does not match the schema".into(),
        ));
    }
    Ok(rows
        .into_iter()
        .map(|r| DiagnosticsRecord {
            t: r[0],
            step: r[1] as u64,
            e_total: r[2],
            f_free: r[3],
            d_diss: r[4],
            phi_mean: r[5],
            phi_mean_pred: r[6],
            phi_mean_err: r[7],
            sigma_mean: r[8],
            sigma_drift: r[9],
            separation: r[10],
            grad_mu: r[11],
            grad_sigchi: r[12],
            v_h1: r[13],
            lambda: r[14],
            energy_residual: r[15],
            int_mu: 0.0,
        })
        .collect())
}

/// Cell-average the MAC velocity for visualization.
fn cell_velocity(state: &SimState) -> Vec<[f64; 3]> {
    let grid = state.grid();
    let [nx, ny, nz] = grid.dims();
    let mut out = vec![[0.0; 3]; grid.n_cells()];
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let c = grid.idx(ix, iy, iz);
                out[c][0] = 0.5
                    * (state.v.comp(0)[grid.face_idx(0, ix, iy, iz)]
                        + state.v.comp(0)[grid.face_idx(0, ix + 1, iy, iz)]);
                out[c][1] = 0.5
                    * (state.v.comp(1)[grid.face_idx(1, ix, iy, iz)]
                        + state.v.comp(1)[grid.face_idx(1, ix, iy + 1, iz)]);
                if grid.dim() == 3 {
                    out[c][2] = 0.5
                        * (state.v.comp(2)[grid.face_idx(2, ix, iy, iz)]
                            + state.v.comp(2)[grid.face_idx(2, ix, iy, iz + 1)]);
                }
            }
        }
    }
    out
}

/// VTK legacy ASCII snapshot: STRUCTURED_POINTS over the cell centers
/// (DIMENSIONS = grid dims in x y z order, ORIGIN = first cell center), with
/// phi, mu, sigma, p as SCALARS and the cell-averaged velocity as VECTORS.
pub fn write_vtk_snapshot(state: &SimState, path: &Path) -> Result<()> {
    let grid = state.grid();
    let [nx, ny, nz] = grid.dims();
    let h = grid.spacing();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "chns snapshot step {} t {:.16e}", state.step, state.t)?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {nx} {ny} {nz}")?;
    writeln!(
        w,
        "ORIGIN {:.16e} {:.16e} {:.16e}",
        0.5 * h[0],
        0.5 * h[1],
        0.5 * h[2]
    )?;
    writeln!(w, "SPACING {:.16e} {:.16e} {:.16e}", h[0], h[1], h[2])?;
    writeln!(w, "POINT_DATA {}", grid.n_cells())?;
    for (name, field) in [
        ("phi", &state.phi),
        ("mu", &state.mu),
        ("sigma", &state.sigma),
        ("p", &state.p),
    ] {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in &field.values {
            writeln!(w, "{v:.16e}")?;
        }
    }
    writeln!(w, "VECTORS velocity double")?;
    for v in cell_velocity(state) {
        writeln!(w, "{:.16e} {:.16e} {:.16e}", v[0], v[1], v[2])?;
    }
    w.flush()?;
    Ok(())
}

/// Minimal VTK reader for the snapshots written above; returns
/// (dims, named scalar arrays, velocity vectors).
pub fn read_vtk_snapshot(
    path: &Path,
) -> Result<([usize; 3], Vec<(String, Vec<f64>)>, Vec<[f64; 3]>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().peekable();
    let mut dims = [0usize; 3];
    let mut n_points = 0usize;
    let mut scalars: Vec<(String, Vec<f64>)> = Vec::new();
    let mut vectors: Vec<[f64; 3]> = Vec::new();
    while let Some(line) = lines.next() {
        let mut words = line.split_whitespace();
        match words.next() {
            Some("DIMENSIONS") => {
                for d in dims.iter_mut() {
                    *d = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| Error::Checkpoint("bad DIMENSIONS line".into()))?;
                }
            }
            Some("POINT_DATA") => {
                n_points = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| Error::Checkpoint("bad POINT_DATA line".into()))?;
            }
            Some("SCALARS") => {
                let name = words
                    .next()
                    .ok_or_else(|| Error::Checkpoint("SCALARS without a name".into()))?
                    .to_string();
                // skip LOOKUP_TABLE
                lines.next();
                let mut vals = Vec::with_capacity(n_points);
                while vals.len() < n_points {
                    let l = lines
                        .next()
                        .ok_or_else(|| Error::Checkpoint("truncated SCALARS block".into()))?;
                    for tok in l.split_whitespace() {
                        vals.push(
                            tok.parse().map_err(|_| {
                                Error::Checkpoint(format!("bad scalar value `{tok}`"))
                            })?,
                        );
                    }
                }
                scalars.push((name, vals));
            }
            Some("VECTORS") => {
                let mut vals = Vec::with_capacity(n_points);
                while vals.len() < n_points {
                    let l = lines
                        .next()
                        .ok_or_else(|| Error::Checkpoint("truncated VECTORS block".into()))?;
                    let nums: Vec<f64> = l
                        .split_whitespace()
                        .map(|t| t.parse().unwrap_or(f64::NAN))
                        .collect();
                    for chunk in nums.chunks(3) {
                        if chunk.len() == 3 {
                            vals.push([chunk[0], chunk[1], chunk[2]]);
                        }
                    }
                }
                vectors = vals;
            }
            _ => {}
        }
    }
    Ok((dims, scalars, vectors))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"CHNS";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic `CHNS`, u32 version, u8 dimension, dims (u64),
/// lengths (f64), time, step, the cached means and clip counter, then the
/// field arrays (phi, mu, sigma, p, velocity components) as little-endian
/// f64 in row-major order.
pub fn save_checkpoint(state: &SimState, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let grid = state.grid();
    let dim = grid.dim();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(dim as u8).to_le_bytes())?;
    for a in 0..dim {
        w.write_all(&(grid.dims()[a] as u64).to_le_bytes())?;
    }
    for a in 0..dim {
        w.write_all(&grid.lengths()[a].to_le_bytes())?;
    }
    w.write_all(&state.t.to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&state.phi_mean0.to_le_bytes())?;
    w.write_all(&state.sigma_mean0.to_le_bytes())?;
    w.write_all(&state.phi_mean_recurrence.to_le_bytes())?;
    w.write_all(&state.clip_events.to_le_bytes())?;
    for field in [&state.phi, &state.mu, &state.sigma, &state.p] {
        for v in &field.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    for a in 0..dim {
        for v in state.v.comp(a) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CheckpointReader<R: Read> {
    r: R,
}

impl<R: Read> CheckpointReader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r
            .read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        Ok(buf)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
}

/// Load a checkpoint; the inverse of `save_checkpoint`, bit-exact.
pub fn load_checkpoint(path: &Path) -> Result<SimState> {
    let file = File::open(path)?;
    let mut r = CheckpointReader {
        r: BufReader::new(file),
    };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(
            "bad magic bytes (not a CHNS checkpoint)".into(),
        ));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let dim = u8::from_le_bytes(r.bytes()?) as usize;
    if dim != 2 && dim != 3 {
        return Err(Error::Checkpoint(format!("bad dimension {dim}")));
    }
    let mut dims = Vec::with_capacity(dim);
    for _ in 0..dim {
        dims.push(r.u64()? as usize);
    }
    let mut lengths = Vec::with_capacity(dim);
    for _ in 0..dim {
        lengths.push(r.f64()?);
    }
    let grid = Grid::new(&dims, &lengths)?;
    let t = r.f64()?;
    let step = r.u64()?;
    let phi_mean0 = r.f64()?;
    let sigma_mean0 = r.f64()?;
    let phi_mean_recurrence = r.f64()?;
    let clip_events = r.u64()?;
    let n = grid.n_cells();
    let phi = ScalarField {
        grid,
        values: r.f64_vec(n)?,
        bc: crate::grid::ScalarBc::NeumannZero,
    };
    let mu = ScalarField {
        grid,
        values: r.f64_vec(n)?,
        bc: crate::grid::ScalarBc::NeumannZero,
    };
    let sigma = ScalarField {
        grid,
        values: r.f64_vec(n)?,
        bc: crate::grid::ScalarBc::NeumannZero,
    };
    let p = ScalarField {
        grid,
        values: r.f64_vec(n)?,
        bc: crate::grid::ScalarBc::NeumannZero,
    };
    let mut v = VectorField::zeros(grid);
    for a in 0..dim {
        let len = grid.n_faces(a);
        let vals = r.f64_vec(len)?;
        v.comp_mut(a).copy_from_slice(&vals);
    }
    // trailing garbage means the file is not what we wrote
    let mut extra = [0u8; 1];
    if r.r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after checkpoint payload".into(),
        ));
    }
    Ok(SimState {
        v,
        p,
        phi,
        mu,
        sigma,
        t,
        step,
        phi_mean0,
        sigma_mean0,
        phi_mean_recurrence,
        clip_events,
    })
}

/// One-line JSON object from flat fields.
pub fn json_line(fields: &[(&str, JsonValue)]) -> String {
    let mut s = String::from("{");
    for (i, (k, v)) in fields.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(&format!("\"{k}\":"));
        match v {
            JsonValue::Bool(b) => s.push_str(if *b { "true" } else { "false" }),
            JsonValue::Num(x) => {
                if x.is_finite() {
                    s.push_str(&format!("{x:e}"));
                } else {
                    s.push_str("null");
                }
            }
            JsonValue::Str(t) => s.push_str(&format!("\"{t}\"")),
        }
    }
    s.push('}');
    s
}

pub enum JsonValue {
    Bool(bool),
    Num(f64),
    Str(String),
}

/// Build the initial state described by a run config.
pub fn build_initial_state(cfg: &crate::config::RunConfig) -> Result<SimState> {
    use crate::config::InitSpec;
    let grid = cfg.grid()?;
    let potential = cfg.potential()?;
    let params: PhysParams = cfg.params;
    match &cfg.init {
        InitSpec::Uniform => {
            let phi = ScalarField::constant(grid, cfg.phi_mean);
            let sigma = ScalarField::constant(grid, cfg.sigma_mean);
            SimState::new(VectorField::zeros(grid), phi, sigma, &params, &potential)
        }
        InitSpec::Random {
            seed,
            amplitude,
            smoothing,
        } => {
            let phi = crate::stationary::random_smooth_field(
                grid,
                *seed,
                *amplitude,
                *smoothing,
                cfg.phi_mean,
            );
            let sigma = crate::stationary::random_smooth_field(
                grid,
                seed.wrapping_add(0x5161),
                *amplitude,
                *smoothing,
                cfg.sigma_mean,
            );
            SimState::new(VectorField::zeros(grid), phi, sigma, &params, &potential)
        }
        InitSpec::File { path } => {
            let state = load_checkpoint(Path::new(path))?;
            if state.grid() != grid {
                return Err(Error::GridMismatch);
            }
            Ok(state)
        }
        InitSpec::PerturbedEquilibrium {
            path,
            amplitude,
            v_amplitude,
            seed,
        } => {
            let base = load_checkpoint(Path::new(path))?;
            if base.grid() != grid {
                return Err(Error::GridMismatch);
            }
            perturb_state(&base, *amplitude, *v_amplitude, *seed, &params, &potential)
        }
    }
}

/// Perturb an equilibrium state: zero-mean smooth noise on phi and sigma,
/// and a solenoidal velocity scaled to the requested L2 norm.
pub fn perturb_state(
    base: &SimState,
    amplitude: f64,
    v_amplitude: f64,
    seed: u64,
    params: &PhysParams,
    potential: &PotentialSpec,
) -> Result<SimState> {
    let grid = base.grid();
    let mut phi = base.phi.clone();
    let dphi = crate::stationary::random_smooth_field(grid, seed, amplitude, 2, 0.0);
    phi.add_scaled(&dphi, 1.0);
    let mut sigma = base.sigma.clone();
    let dsigma =
        crate::stationary::random_smooth_field(grid, seed.wrapping_add(77), amplitude, 2, 0.0);
    sigma.add_scaled(&dsigma, 1.0);

    let mut v = VectorField::zeros(grid);
    if v_amplitude > 0.0 {
        let mut rng = crate::rng::SplitMix64::new(seed.wrapping_add(154));
        for a in 0..grid.dim() {
            for val in v.comp_mut(a).iter_mut() {
                *val = rng.next_symm();
            }
        }
        v.enforce_noslip();
        v = crate::operators::leray_project(&v)?;
        let norm = v.norm_l2();
        if norm > 0.0 {
            v.scale(v_amplitude / norm);
        }
    }
    SimState::new(v, phi, sigma, params, potential)
}
