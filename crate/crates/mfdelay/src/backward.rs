//! Backward equation for the cost/value process along a simulated forward
//! ensemble:
//!
//! ```text
//! -dY = f(t, X(t), X(t-l), Y, Z, law(X, Y), v) dt - Z dW,
//!  Y(T) = Phi(X(T), law(X(T))),
//! ```
//!
//! solved by least-squares Monte Carlo: at each step the continuation value
//! and `Z` are conditional expectations given `(X(t), X(t-l))`, approximated
//! by regression on the shared per-step feature basis.  The joint law
//! argument uses the regressed continuation values, i.e. the beginning-of-
//! step empirical law of `(X, Y)`.

use crate::coeffs::{CoefficientSet, DriverArgs};
use crate::ensemble::PathEnsemble;
use crate::error::Result;
use crate::forward::ForwardSolution;
use crate::grid::TimeGrid;
use crate::regression::{RegressionBasis, StepRegression};
use crate::rng::BrownianBundle;

#[derive(Debug)]
pub struct BackwardSolution {
    /// Value process on steps `0 ..= n`.
    pub y: PathEnsemble,
    /// Martingale integrand on steps `0 ..= n - 1`.
    pub z: PathEnsemble,
}

impl BackwardSolution {
    /// Monte Carlo estimate of `Y(0)` (the cost of the applied control).
    pub fn y0(&self) -> f64 {
        crate::ensemble::mean(self.y.col(0))
    }

    /// `Z` clamped to its last defined step (terminal evaluation helper).
    #[inline]
    pub fn z_at(&self, particle: usize, step: i64) -> f64 {
        self.z.at(particle, step.min(self.z.last()))
    }
}

pub fn solve_backward_mfbsde(
    model: &CoefficientSet,
    forward: &ForwardSolution,
    grid: &TimeGrid,
    noise: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<BackwardSolution> {
    let n = grid.n();
    let k = grid.k() as i64;
    let np = noise.particles();
    let dt = grid.dt();

    let mut y = PathEnsemble::zeros(np, 0, n as i64);
    let mut z = PathEnsemble::zeros(np, 0, n as i64 - 1);

    // exact terminal condition, particle by particle
    {
        let xt = forward.x.col(n as i64);
        let tctx = model.terminal.ctx(xt);
        let yc = y.col_mut(n as i64);
        for (i, out) in yc.iter_mut().enumerate() {
            *out = model.terminal.val(xt[i], &tctx);
        }
    }

    let mut ycont = vec![0.0f64; np];
    let mut ztarget = vec![0.0f64; np];

    for j in (0..n).rev() {
        let t = grid.time(j as i64);
        let xs = forward.x.col(j as i64);
        let xds = forward.x.col(j as i64 - k);
        let ynext = y.col(j as i64 + 1);
        let reg = StepRegression::new(basis, xs, xds, None)?;

        reg.fit_into(ynext, &mut ycont);
        // martingale control variate: the conditional mean is F_j-measurable,
        // so subtracting it before multiplying by the increment leaves the
        // estimator unbiased while removing almost all of its variance
        for i in 0..np {
            ztarget[i] = (ynext[i] - ycont[i]) * noise.increment(i, j);
        }
        reg.fit_into(&ztarget, z.col_mut(j as i64));
        let zs = z.col(j as i64);

        let fctx = model.driver.ctx(xs, &ycont);
        let yc = y.col_mut(j as i64);
        for i in 0..np {
            let zi = zs[i] / dt;
            let a = DriverArgs {
                t,
                x: xs[i],
                xd: xds[i],
                y: ycont[i],
                z: zi,
                v: forward.control(i, j),
            };
            yc[i] = ycont[i] + model.driver.val(a, &fctx) * dt;
        }
        let zc = z.col_mut(j as i64);
        for v in zc.iter_mut() {
            *v /= dt;
        }
    }

    Ok(BackwardSolution { y, z })
}
