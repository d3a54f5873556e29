//! Identification of uncertain diffusion coefficients in `−∇·(q∇u) = f`
//! from stochastic observations of `u`.
//!
//! Random fields are discretized as P1 finite elements in space times a
//! hierarchical sparse-grid basis in the stochastic variables. The
//! coefficient is recovered with an augmented Lagrangian method that
//! alternates between the parameter and the state.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod fem;
pub mod forward;
pub mod kl;
pub mod linalg;
pub mod mesh;
pub mod optimizer;
pub mod sparse_grid;
pub mod stochastic;

pub use error::{Error, Result};
