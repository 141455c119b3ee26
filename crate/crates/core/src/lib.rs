//! Monte-Carlo particle-flow solver for the incompressible Navier-Stokes
//! equations on a truncated box.
//!
//! The velocity field is represented through a Brownian-perturbed
//! characteristic map: particles follow `d eta = u(t, eta) dt + eps dB`,
//! the inverse map `kappa = eta^{-1}` pulls the initial momentum back to
//! Eulerian coordinates, and averaging over Brownian samples recovers the
//! viscous velocity (`nu = eps^2 / 2`). The drift itself is assembled by
//! convolving the gradient kernel of the Newtonian potential against the
//! antisymmetric part of the pulled-back momentum gradient, and a Picard
//! loop iterates flow -> momenta -> drift until the displacement sequence
//! is Cauchy in a weighted Sobolev norm.
//!
//! Modules:
//! - [`fields`]: grid discretization, finite differences, interpolation
//! - [`sobolev`]: weighted Sobolev norms and empirical inequality checks
//! - [`potential`]: Newtonian potential, gradient kernels, Helmholtz projection
//! - [`flow`]: Brownian ensembles, flow integration and inversion
//! - [`lagrangian`]: momentum accumulation, kernel drift, ensemble averaging
//! - [`solver`]: Picard iteration, horizon selection, residual diagnostics
//! - [`reference`]: closed-form solutions and statistical oracles
//! - [`cli`]: run records, scenario execution, probing
//! - [`verify`]: the acceptance criteria as runnable checks

pub mod cli;
pub mod config;
pub mod corpus;
pub mod fields;
pub mod flow;
pub mod lagrangian;
pub(crate) mod linalg;
pub mod potential;
pub mod reference;
pub mod sobolev;
pub mod solver;
pub mod verify;

pub use fields::{Field, GridSpec, Rank, SpaceParams};
pub use solver::{SolverConfig, SolverError};
