//! Forward simulation of the controlled delayed mean-field state equation
//!
//! ```text
//! dX(t) = b(t, X(t), X(t-l), law(X(t)), v(t)) dt
//!       + sigma(t, X(t), X(t-l), law(X(t)), v(t)) dW(t),   t in [0, T],
//! X(t)  = x0(t),                                            t in [-l, 0],
//! ```
//!
//! by explicit Euler on the shared grid.  The empirical law entering the
//! coefficients at step `j` is the beginning-of-step law of `X(t_j)`, and the
//! delayed state is the exact shifted column `j - k`.

use rayon::prelude::*;

use crate::coeffs::{CoefficientSet, StateArgs};
use crate::control::SpikeVariation;
use crate::ensemble::PathEnsemble;
use crate::error::{MfError, Result};
use crate::grid::TimeGrid;
use crate::rng::BrownianBundle;

/// Deterministic initial segment `t -> x(t)` on `[-l, 0]`.
pub struct InitialSegment(pub Box<dyn Fn(f64) -> f64 + Send + Sync>);

impl InitialSegment {
    pub fn constant(x0: f64) -> Self {
        InitialSegment(Box::new(move |_| x0))
    }
}

/// Simulated state paths plus the control values that were actually applied.
#[derive(Debug)]
pub struct ForwardSolution {
    /// State on steps `-k ..= n`.
    pub x: PathEnsemble,
    /// Applied control per particle on steps `0 ..= n - 1`.
    pub controls: PathEnsemble,
}

impl ForwardSolution {
    /// Realised control of a particle at a forward step.
    #[inline]
    pub fn control(&self, particle: usize, step: usize) -> f64 {
        self.controls.at(particle, step as i64)
    }
}

pub fn simulate_forward(
    model: &CoefficientSet,
    policy: &SpikeVariation,
    grid: &TimeGrid,
    noise: &BrownianBundle,
    init: &InitialSegment,
) -> Result<ForwardSolution> {
    let n = grid.n();
    let k = grid.k() as i64;
    let np = noise.particles();
    let dt = grid.dt();

    let mut x = PathEnsemble::zeros(np, -k, n as i64);
    x.fill_initial_segment(dt, &init.0);
    let mut controls = PathEnsemble::zeros(np, 0, n as i64 - 1);
    let mut next = vec![0.0f64; np];

    for j in 0..n {
        let t = grid.time(j as i64);
        let xs = x.col(j as i64);
        let xds = x.col(j as i64 - k);
        let bctx = model.drift.ctx(xs);
        let sctx = model.diffusion.ctx(xs);
        let vcol = controls.col_mut(j as i64);
        vcol.par_iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = policy.value(j, t, xs[i], xds[i]));
        let vcol = controls.col(j as i64);
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            let a = StateArgs {
                t,
                x: xs[i],
                xd: xds[i],
                v: vcol[i],
            };
            *out = xs[i]
                + model.drift.val(a, &bctx) * dt
                + model.diffusion.val(a, &sctx) * noise.increment(i, j);
        });
        for (i, &v) in next.iter().enumerate() {
            if v.abs() > model.blowup_guard || v.is_nan() {
                return Err(MfError::NumericalBlowup {
                    t: grid.time(j as i64 + 1),
                    particle: i,
                    value: v,
                    guard: model.blowup_guard,
                });
            }
        }
        x.col_mut(j as i64 + 1).copy_from_slice(&next);
    }

    Ok(ForwardSolution { x, controls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{
        DriverCoeff, DriverPart, StateCoeff, StatePart, TermPart, TerminalCoeff,
        DEFAULT_BLOWUP_GUARD,
    };
    use crate::control::{Constant, SpikeVariation};
    use crate::grid::build_grid;
    use crate::lions::Cylindrical1;
    use std::sync::Arc;

    fn plain(drift: StatePart, diffusion: StatePart) -> CoefficientSet {
        CoefficientSet {
            drift: StateCoeff::local(drift),
            diffusion: StateCoeff::local(diffusion),
            driver: DriverCoeff::local(DriverPart::zero()),
            terminal: TerminalCoeff::local(TermPart::zero()),
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    fn run(model: &CoefficientSet, dt: f64, particles: usize, seed: u64) -> ForwardSolution {
        let g = build_grid(1.0, 1.5, dt).unwrap();
        let b = BrownianBundle::new(seed, particles, &g);
        let policy = SpikeVariation::none(Arc::new(Constant(0.0)), Arc::new(Constant(0.0)));
        simulate_forward(model, &policy, &g, &b, &InitialSegment::constant(1.0)).unwrap()
    }

    /// Pure deterministic exponential growth: dX = X dt.
    #[test]
    fn deterministic_exponential() {
        let model = plain(
            StatePart {
                f: Box::new(|a| a.x),
                x: Box::new(|_| 1.0),
                ..StatePart::zero()
            },
            StatePart::zero(),
        );
        let sol = run(&model, 1e-4, 3, 1);
        let g = build_grid(1.0, 1.5, 1e-4).unwrap();
        let xt = sol.x.at(0, g.n() as i64);
        assert!(
            (xt - 1.5f64.exp()).abs() < 5e-4,
            "X(T) = {xt} vs {}",
            1.5f64.exp()
        );
    }

    /// Mean-field exponential: dX = E[X] dt with X(0)=1 keeps all particles
    /// equal, so X(T) = e^T exactly in the ODE limit.
    #[test]
    fn mean_field_exponential() {
        let mut model = plain(StatePart::zero(), StatePart::zero());
        model.drift = StateCoeff {
            loc: StatePart::zero(),
            coupling: StatePart::constant(1.0),
            mf: Some(Cylindrical1::scaled_mean(1.0)),
        };
        let sol = run(&model, 1e-4, 5, 2);
        let g = build_grid(1.0, 1.5, 1e-4).unwrap();
        for i in 0..5 {
            let xt = sol.x.at(i, g.n() as i64);
            assert!((xt - 1.5f64.exp()).abs() < 5e-4, "particle {i}: {xt}");
        }
    }

    /// Delayed deterministic equation dX = X(t-l) dt, X ≡ 1 on [-l, 0]:
    /// X(t) = 1 + t on [0, l], then 1 + t + (t-l)^2/2 on [l, 2l].
    #[test]
    fn delayed_drift_method_of_steps() {
        let model = plain(
            StatePart {
                f: Box::new(|a| a.xd),
                xd: Box::new(|_| 1.0),
                ..StatePart::zero()
            },
            StatePart::zero(),
        );
        let sol = run(&model, 1e-4, 1, 3);
        let g = build_grid(1.0, 1.5, 1e-4).unwrap();
        let at = |t: f64| sol.x.at(0, g.snap(t));
        assert!((at(0.5) - 1.5).abs() < 1e-6);
        assert!((at(1.0) - 2.0).abs() < 1e-6);
        let t = 1.5;
        let exact = 1.0 + t + (t - 1.0) * (t - 1.0) / 2.0;
        assert!((at(t) - exact).abs() < 1e-4, "{} vs {exact}", at(t));
    }

    /// GBM moments: E[X(T)] = exp(mu T), and martingale case stays centred.
    #[test]
    fn gbm_mean() {
        let model = plain(
            StatePart {
                f: Box::new(|a| 0.1 * a.x),
                x: Box::new(|_| 0.1),
                ..StatePart::zero()
            },
            StatePart {
                f: Box::new(|a| 0.3 * a.x),
                x: Box::new(|_| 0.3),
                ..StatePart::zero()
            },
        );
        let sol = run(&model, 0.005, 20_000, 4);
        let g = build_grid(1.0, 1.5, 0.005).unwrap();
        let m = crate::ensemble::mean(sol.x.col(g.n() as i64));
        let exact = (0.1f64 * 1.5).exp();
        assert!((m - exact).abs() < 0.01, "mean {m} vs {exact}");
    }

    #[test]
    fn blowup_guard_fires() {
        let mut model = plain(
            StatePart {
                f: Box::new(|a| 40.0 * a.x),
                x: Box::new(|_| 40.0),
                ..StatePart::zero()
            },
            StatePart::zero(),
        );
        model.blowup_guard = 1e3;
        let g = build_grid(1.0, 1.5, 0.01).unwrap();
        let b = BrownianBundle::new(1, 2, &g);
        let policy = SpikeVariation::none(Arc::new(Constant(0.0)), Arc::new(Constant(0.0)));
        let err = simulate_forward(&model, &policy, &g, &b, &InitialSegment::constant(1.0))
            .unwrap_err();
        assert!(matches!(err, MfError::NumericalBlowup { .. }), "{err}");
    }

    /// Determinism: identical runs bitwise equal; different thread counts too.
    #[test]
    fn bitwise_determinism_across_thread_counts() {
        let model = plain(
            StatePart {
                f: Box::new(|a| 0.1 * a.x + 0.2 * a.xd),
                x: Box::new(|_| 0.1),
                xd: Box::new(|_| 0.2),
                ..StatePart::zero()
            },
            StatePart {
                f: Box::new(|a| 0.2 * a.x),
                x: Box::new(|_| 0.2),
                ..StatePart::zero()
            },
        );
        let base = run(&model, 0.01, 500, 7);
        for threads in [1usize, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            let other = pool.install(|| run(&model, 0.01, 500, 7));
            assert_eq!(base.x.raw(), other.x.raw(), "threads = {threads}");
        }
    }

    /// Perturbing the control only on [s, T) leaves the path on [-l, s]
    /// bitwise unchanged (causality of the scheme).
    #[test]
    fn spike_causality() {
        let model = plain(
            StatePart {
                f: Box::new(|a| 0.1 * a.x + a.v),
                x: Box::new(|_| 0.1),
                ..StatePart::zero()
            },
            StatePart {
                f: Box::new(|a| 0.2 * a.x),
                x: Box::new(|_| 0.2),
                ..StatePart::zero()
            },
        );
        let g = build_grid(1.0, 1.5, 0.01).unwrap();
        let b = BrownianBundle::new(11, 50, &g);
        let base_policy = SpikeVariation::none(Arc::new(Constant(0.0)), Arc::new(Constant(0.0)));
        let spiked = SpikeVariation::new(
            Arc::new(Constant(0.0)),
            Arc::new(Constant(1.0)),
            Some(0.75),
            0.1,
            &g,
        );
        let init = InitialSegment::constant(1.0);
        let a = simulate_forward(&model, &base_policy, &g, &b, &init).unwrap();
        let c = simulate_forward(&model, &spiked, &g, &b, &init).unwrap();
        let split = spiked.step_lo as i64;
        for j in -(g.k() as i64)..=split {
            assert_eq!(a.x.col(j), c.x.col(j), "col {j}");
        }
        // and the spike does change the path afterwards
        assert_ne!(a.x.col(g.n() as i64), c.x.col(g.n() as i64));
    }
}
