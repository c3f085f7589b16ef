//! Uniform time grid covering `[-l, T + l]` for a system with one pointwise
//! delay `l` and horizon `T`.
//!
//! Index convention: step `i` lives at time `i * dt` for `i in -k ..= n + k`,
//! where `k = l / dt` and `n = T / dt` are exact integers.  The segment
//! `[-k, 0]` carries the initial path, `[0, n]` the controlled dynamics, and
//! `(n, n + k]` the zero-tail of the backward equations.  Reading a delayed
//! state is always the exact shift `i - k`; no interpolation happens anywhere.

use crate::error::{MfError, Result};

/// Relative tolerance used when checking that `l` and `T` are integer
/// multiples of `dt`.
const ALIGN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    /// Number of steps per delay interval: `k = l / dt`.
    k: usize,
    /// Number of steps to the horizon: `n = T / dt`.
    n: usize,
}

fn aligned_steps(span: f64, dt: f64) -> Option<usize> {
    let ratio = span / dt;
    let rounded = ratio.round();
    if rounded < 1.0 {
        return None;
    }
    let err = (ratio - rounded).abs();
    if err <= ALIGN_TOL * ratio.max(1.0) {
        Some(rounded as usize)
    } else {
        None
    }
}

/// Build the grid for delay `delay`, horizon `horizon` and step `dt`.
///
/// Fails with [`MfError::NonAlignedDelay`] when either span is not an integer
/// multiple of `dt`, and with [`MfError::DelayRegime`] unless
/// `delay < horizon <= 2 * delay` (the single-overlap window the second-order
/// expansion is derived in).
pub fn build_grid(delay: f64, horizon: f64, dt: f64) -> Result<TimeGrid> {
    if dt <= 0.0 || !dt.is_finite() || !delay.is_finite() || !horizon.is_finite() {
        return Err(MfError::Config(format!(
            "grid spans must be finite and dt positive (delay={delay}, horizon={horizon}, dt={dt})"
        )));
    }
    let k = aligned_steps(delay, dt)
        .ok_or(MfError::NonAlignedDelay { delay, dt })?;
    let n = aligned_steps(horizon, dt)
        .ok_or(MfError::NonAlignedDelay { delay: horizon, dt })?;
    if !(k < n && n <= 2 * k) {
        return Err(MfError::DelayRegime {
            horizon,
            delay,
            two_delay: 2.0 * delay,
        });
    }
    Ok(TimeGrid { dt, k, n })
}

impl TimeGrid {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Steps per delay interval.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Steps to the horizon.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delay(&self) -> f64 {
        self.k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.dt
    }

    /// Time at step `i`, computed as a single product so it does not drift
    /// with accumulated rounding.
    pub fn time(&self, i: i64) -> f64 {
        i as f64 * self.dt
    }

    /// First valid step index (`-k`).
    pub fn first(&self) -> i64 {
        -(self.k as i64)
    }

    /// Last valid step index (`n + k`).
    pub fn last(&self) -> i64 {
        (self.n + self.k) as i64
    }

    /// Snap a time in `[-l, T + l]` to the nearest grid step.
    pub fn snap(&self, t: f64) -> i64 {
        let i = (t / self.dt).round() as i64;
        i.clamp(self.first(), self.last())
    }

    /// Total number of grid points, `n + 2k + 1`.
    pub fn len(&self) -> usize {
        self.n + 2 * self.k + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}
