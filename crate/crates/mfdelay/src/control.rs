//! Admissible controls and spike perturbations.

use std::sync::Arc;

use crate::grid::TimeGrid;

/// A control policy evaluated along the simulation.  Policies see the step
/// time and the particle's current and delayed state, which covers open-loop
/// (time only) and Markov feedback controls.
pub trait Control: Send + Sync {
    fn value(&self, t: f64, x: f64, xd: f64) -> f64;
}

/// Deterministic open-loop control `t -> v(t)`.
pub struct OpenLoop<F: Fn(f64) -> f64 + Send + Sync>(pub F);

impl<F: Fn(f64) -> f64 + Send + Sync> Control for OpenLoop<F> {
    fn value(&self, t: f64, _x: f64, _xd: f64) -> f64 {
        (self.0)(t)
    }
}

/// Markov feedback control `(t, x, xd) -> v`.
pub struct Feedback<F: Fn(f64, f64, f64) -> f64 + Send + Sync>(pub F);

impl<F: Fn(f64, f64, f64) -> f64 + Send + Sync> Control for Feedback<F> {
    fn value(&self, t: f64, x: f64, xd: f64) -> f64 {
        (self.0)(t, x, xd)
    }
}

/// Piecewise-constant open-loop control given by one value per forward step.
/// Times are snapped to the owning grid; values beyond the table repeat the
/// last entry.
pub struct StepTable {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Control for StepTable {
    fn value(&self, t: f64, _x: f64, _xd: f64) -> f64 {
        let j = ((t / self.dt).round() as i64).max(0) as usize;
        self.values[j.min(self.values.len() - 1)]
    }
}

/// Constant control.
pub struct Constant(pub f64);

impl Control for Constant {
    fn value(&self, _t: f64, _x: f64, _xd: f64) -> f64 {
        self.0
    }
}

/// A spike variation of a base policy: on the window `[tau, tau + eps)` the
/// alternate policy acts, elsewhere the base does.  The window is snapped to
/// whole grid steps at construction (at least one step), so the indicator is
/// exact on the discretisation.
#[derive(Clone)]
pub struct SpikeVariation {
    pub base: Arc<dyn Control>,
    pub alternate: Arc<dyn Control>,
    /// First step inside the window.
    pub step_lo: usize,
    /// First step past the window.
    pub step_hi: usize,
    dt: f64,
}

impl SpikeVariation {
    /// Snap `[tau, tau + eps)` to grid steps.  `tau` defaults to 0.6 of the
    /// horizon when `None`; `eps` is rounded to a whole number of steps, at
    /// least one, and the window is clipped to `[0, T)`.
    pub fn new(
        base: Arc<dyn Control>,
        alternate: Arc<dyn Control>,
        tau: Option<f64>,
        eps: f64,
        grid: &TimeGrid,
    ) -> Self {
        let tau = tau.unwrap_or(0.6 * grid.horizon());
        let lo = grid.snap(tau).clamp(0, grid.n() as i64 - 1) as usize;
        let steps = ((eps / grid.dt()).round() as usize).max(1);
        let hi = (lo + steps).min(grid.n());
        SpikeVariation {
            base,
            alternate,
            step_lo: lo,
            step_hi: hi,
            dt: grid.dt(),
        }
    }

    /// Zero-width variation: identical to the base policy (`eps = 0`).
    pub fn none(base: Arc<dyn Control>, alternate: Arc<dyn Control>) -> Self {
        SpikeVariation {
            base,
            alternate,
            step_lo: 0,
            step_hi: 0,
            dt: 1.0,
        }
    }

    /// Actual (snapped) window width in time units.
    pub fn eps(&self) -> f64 {
        (self.step_hi - self.step_lo) as f64 * self.dt
    }

    #[inline]
    pub fn in_window(&self, step: usize) -> bool {
        step >= self.step_lo && step < self.step_hi
    }

    /// The perturbed policy value at a given step.
    #[inline]
    pub fn value(&self, step: usize, t: f64, x: f64, xd: f64) -> f64 {
        if self.in_window(step) {
            self.alternate.value(t, x, xd)
        } else {
            self.base.value(t, x, xd)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    #[test]
    fn snapping_defaults() {
        let g = build_grid(1.0, 1.5, 0.01).unwrap();
        let s = SpikeVariation::new(
            Arc::new(Constant(0.0)),
            Arc::new(Constant(1.0)),
            None,
            0.05,
            &g,
        );
        // default tau = 0.6 * 1.5 = 0.9 -> step 90, eps = 5 steps
        assert_eq!(s.step_lo, 90);
        assert_eq!(s.step_hi, 95);
        assert!((s.eps() - 0.05).abs() < 1e-12);
        assert_eq!(s.value(89, 0.89, 0.0, 0.0), 0.0);
        assert_eq!(s.value(90, 0.90, 0.0, 0.0), 1.0);
        assert_eq!(s.value(94, 0.94, 0.0, 0.0), 1.0);
        assert_eq!(s.value(95, 0.95, 0.0, 0.0), 0.0);
    }

    #[test]
    fn eps_rounds_to_at_least_one_step() {
        let g = build_grid(1.0, 1.5, 0.01).unwrap();
        let s = SpikeVariation::new(
            Arc::new(Constant(0.0)),
            Arc::new(Constant(1.0)),
            Some(0.5),
            1e-9,
            &g,
        );
        assert_eq!(s.step_hi - s.step_lo, 1);
    }

    #[test]
    fn window_clipped_to_horizon() {
        let g = build_grid(1.0, 1.5, 0.1).unwrap();
        let s = SpikeVariation::new(
            Arc::new(Constant(0.0)),
            Arc::new(Constant(1.0)),
            Some(1.4),
            5.0,
            &g,
        );
        assert_eq!(s.step_lo, 14);
        assert_eq!(s.step_hi, 15);
    }

    #[test]
    fn zero_width_never_fires() {
        let s = SpikeVariation::none(Arc::new(Constant(2.0)), Arc::new(Constant(9.0)));
        for step in 0..100 {
            assert_eq!(s.value(step, step as f64, 0.0, 0.0), 2.0);
        }
    }

    #[test]
    fn step_table_lookup() {
        let c = StepTable {
            dt: 0.5,
            values: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(c.value(0.0, 0.0, 0.0), 1.0);
        assert_eq!(c.value(0.5, 0.0, 0.0), 2.0);
        assert_eq!(c.value(7.0, 0.0, 0.0), 3.0);
    }
}
