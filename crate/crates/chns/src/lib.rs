//! Energy-stable solver for a coupled Navier-Stokes-Cahn-Hilliard system
//! with chemotaxis, active transport and an Oono-type reaction, plus the
//! instrumentation to measure its structural laws: energy balance, mass
//! transfer, strict separation, Lyapunov stability near minimizers, and the
//! algebraic decay rate toward equilibrium.

pub mod config;
pub mod dense;
pub mod diagnostics;
pub mod error;
pub mod evolution;
pub mod grid;
pub mod operators;
pub mod output;
pub mod potentials;
pub mod rng;
pub mod spectral;
pub mod stationary;
pub mod verify;

pub use error::{Error, Result};
pub use grid::{Grid, PhysParams, ScalarField, VectorField};
pub use potentials::{PotentialKind, PotentialSpec};
