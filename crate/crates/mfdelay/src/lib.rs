//! Particle methods for optimally controlled mean-field dynamics with one
//! pointwise delay.
//!
//! The crate simulates interacting particle systems whose drift, diffusion,
//! running cost and terminal cost depend on the current state, the state one
//! delay interval ago, the empirical law of the ensemble and a control; it
//! solves the associated backward equations (value, first- and second-order
//! adjoints, auxiliary expansion equation) by least-squares Monte Carlo; and
//! it verifies the resulting variational inequality, duality identity and
//! expansion error rates numerically.  A portfolio/recursive-utility
//! application and its `N`-player approximation are built on top.
//!
//! Everything is deterministic for a fixed seed: Brownian increments are a
//! pure function of `(seed, particle, step)` and all cross-particle
//! reductions run in a fixed order, so results are bitwise identical across
//! thread counts.

pub mod error;
pub mod grid;
pub mod rng;
pub mod ensemble;
pub mod lions;
pub mod wasserstein;
pub mod coeffs;
pub mod control;
pub mod forward;
pub mod variation;
pub mod regression;
pub mod backward;
pub mod adjoint;
pub mod auxiliary;
pub mod hamiltonian;
pub mod expansion;
pub mod rates;
pub mod finance;
pub mod report;
pub mod oracle;

pub use error::{MfError, Result};
pub use grid::{build_grid, TimeGrid};
pub use rng::BrownianBundle;
pub use ensemble::{empirical_expectation, EmpiricalMeasure, PathEnsemble};
