use std::fmt;

/// Errors surfaced by the solver library.
#[derive(Debug)]
pub enum Error {
    /// Grid construction rejected (too small, nonpositive lengths, ...).
    Grid(String),
    /// A field value was NaN or infinite where a finite number is required.
    NonFinite(&'static str),
    /// Input to the inverse Neumann Laplacian had a nonzero mean.
    NotZeroMean {
        mean: f64,
        norm: f64,
    },
    /// An iterative solver failed to reach its tolerance.
    Solver {
        what: &'static str,
        residual: f64,
        iterations: usize,
    },
    /// Newton iteration for the initial-datum regularization did not converge.
    NewtonDiverged {
        residual: f64,
        iterations: usize,
    },
    /// The phase field touched the pure phases under a singular potential.
    SeparationViolation {
        min_separation: f64,
        step: u64,
    },
    /// Two fields live on different grids.
    GridMismatch,
    /// Configuration file problem; carries the offending line when known.
    Config {
        line: usize,
        msg: String,
    },
    /// Checkpoint file is corrupt, truncated or has the wrong version.
    Checkpoint(String),
    /// Not enough data points for a fit.
    FitWindow(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Grid(msg) => write!(f, "grid error: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::NotZeroMean { mean, norm } => {
                write!(f, "input must have zero mean (mean = {mean:e}, norm = {norm:e})")
            }
            Error::Solver {
                what,
                residual,
                iterations,
            } => write!(
                f,
                "{what} solver did not converge: residual {residual:e} after {iterations} iterations"
            ),
            Error::NewtonDiverged {
                residual,
                iterations,
            } => write!(
                f,
                "Newton iteration did not converge: residual {residual:e} after {iterations} iterations"
            ),
            Error::SeparationViolation {
                min_separation,
                step,
            } => write!(
                f,
                "phase field lost strict separation at step {step} (1 - max|phi| = {min_separation:e})"
            ),
            Error::GridMismatch => write!(f, "fields live on different grids"),
            Error::Config { line, msg } => {
                if *line == 0 {
                    write!(f, "config error: {msg}")
                } else {
                    write!(f, "config error at line {line}: {msg}")
                }
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::FitWindow(msg) => write!(f, "rate fit error: {msg}"),
            Error::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
