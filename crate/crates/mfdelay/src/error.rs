//! Error types shared across the crate.

use thiserror::Error;

/// Everything that can go wrong while building grids, simulating paths or
/// solving the backward equations.
#[derive(Debug, Error)]
pub enum MfError {
    /// The delay is not an integer multiple of the step size.  Delayed reads
    /// are exact index shifts, so a non-aligned delay would silently
    /// interpolate; we refuse instead.
    #[error("delay {delay} is not an integer multiple of step size {dt}")]
    NonAlignedDelay { delay: f64, dt: f64 },

    /// The solver targets the single-overlap window `delay < horizon <= 2*delay`.
    /// Outside that window the delayed second-order terms change shape.
    #[error("horizon {horizon} outside supported window ({delay}, {two_delay}] for delay {delay}")]
    DelayRegime {
        horizon: f64,
        delay: f64,
        two_delay: f64,
    },

    /// A simulated state left the guard region; the discretisation has blown up.
    #[error("state magnitude {value:e} exceeded guard {guard:e} at t = {t} (particle {particle})")]
    NumericalBlowup {
        t: f64,
        particle: usize,
        value: f64,
        guard: f64,
    },

    /// Two containers that must describe the same ensemble disagree in size.
    #[error("dimension mismatch: {context} (expected {expected}, got {got})")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// The regression normal equations are singular even after ridge damping.
    #[error("regression design matrix is rank deficient ({features} features, {samples} samples)")]
    RankDeficient { features: usize, samples: usize },

    /// A convergence-rate fit needs at least two perturbation sizes.
    #[error("rate estimation needs at least 2 perturbation sizes, got {got}")]
    InsufficientGrid { got: usize },

    /// A user-supplied model violates one of its declared invariants
    /// (inconsistent hand-coded derivatives, wrong growth, ...).
    #[error("model invariant violated: {0}")]
    ModelInvariant(String),

    /// A fixed-point iteration stalled above its acceptance threshold.
    #[error("iteration failed to converge: residual {residual:e} > {threshold:e} after {iterations} iterations")]
    NoConvergence {
        residual: f64,
        threshold: f64,
        iterations: usize,
    },

    /// Bad run configuration (CLI / config file level).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MfError>;
