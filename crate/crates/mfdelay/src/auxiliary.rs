//! Auxiliary backward equation of the cost expansion and the first-order
//! duality process.
//!
//! The auxiliary BSDE collects everything the adjoint expansion of the
//! perturbed cost does not absorb pointwise:
//!
//! ```text
//! -dY(t) = [ f_y Y + f_z Z + E-hat[f_mu2 Y-hat]
//!            + (A1(t) + Df(t)) 1_E(t) ] dt - Z dW,     Y(T) = 0,
//! A1 = p Db + q Ds + (1/2) P (Ds)^2,
//! Df = f(..., Z* + p Ds, v) - f(..., Z*, u*),
//! ```
//!
//! where `Db, Ds` are the spike jumps of drift and diffusion at the base
//! state.  Its initial value equals, by duality through the linear process
//! `Gamma` (`dGamma = (f_y Gamma + E-hat[f*_mu2 Gamma-hat]) dt + f_z Gamma dW`,
//! `Gamma(0) = 1`), the weighted integral of the spike source — the identity
//! the maximum principle rests on, checked in [`crate::hamiltonian`].

use crate::adjoint::{star_step, FirstAdjoint, SecondAdjoint};
use crate::backward::BackwardSolution;
use crate::coeffs::{CoefficientSet, DriverArgs, StateArgs};
use crate::control::SpikeVariation;
use crate::ensemble::PathEnsemble;
use crate::error::Result;
use crate::forward::ForwardSolution;
use crate::grid::TimeGrid;
use crate::regression::{RegressionBasis, StepRegression};
use crate::rng::BrownianBundle;

#[derive(Debug)]
pub struct AuxiliarySolution {
    /// Auxiliary value process on steps `0 ..= n`.
    pub y: PathEnsemble,
    /// Martingale integrand on steps `0 ..= n - 1`.
    pub z: PathEnsemble,
    /// The spike source `(A1 + Df) 1_E` per step (zero off the window),
    /// kept for the duality check.
    pub source: PathEnsemble,
}

/// Spike source of one particle at one step.
fn spike_source(
    model: &CoefficientSet,
    spike: &SpikeVariation,
    s: &crate::adjoint::StarStep,
    i: usize,
    p: f64,
    q: f64,
    pp: f64,
) -> f64 {
    let au = s.sargs[i];
    let av = StateArgs {
        v: spike.alternate.value(s.t, au.x, au.xd),
        ..au
    };
    let db = model.drift.val(av, &s.bctx) - model.drift.val(au, &s.bctx);
    let ds = model.diffusion.val(av, &s.sctx) - model.diffusion.val(au, &s.sctx);
    let a1 = p * db + q * ds + 0.5 * pp * ds * ds;
    let du = s.dargs[i];
    let dv = DriverArgs {
        z: du.z + p * ds,
        v: av.v,
        ..du
    };
    let df = model.driver.val(dv, &s.fctx) - model.driver.val(du, &s.fctx);
    a1 + df
}

#[allow(clippy::too_many_arguments)]
pub fn solve_auxiliary_bsde(
    model: &CoefficientSet,
    fwd: &ForwardSolution,
    bwd: &BackwardSolution,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    spike: &SpikeVariation,
    grid: &TimeGrid,
    noise: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<AuxiliarySolution> {
    let n = grid.n();
    let np = noise.particles();
    let dt = grid.dt();

    let mut y = PathEnsemble::zeros(np, 0, n as i64);
    let mut z = PathEnsemble::zeros(np, 0, n as i64 - 1);
    let mut source = PathEnsemble::zeros(np, 0, n as i64 - 1);
    let mut ybar = vec![0.0f64; np];
    let mut target = vec![0.0f64; np];

    for j in (0..n).rev() {
        let s = star_step(model, fwd, bwd, grid, j);
        let reg = StepRegression::new(basis, s.xs, s.xds, None)?;
        let ynext = y.col(j as i64 + 1);
        reg.fit_into(ynext, &mut ybar);
        // martingale control variate, as in the other backward solves
        for i in 0..np {
            target[i] = (ynext[i] - ybar[i]) * noise.increment(i, j);
        }
        reg.fit_into(&target, z.col_mut(j as i64));
        for v in z.col_mut(j as i64).iter_mut() {
            *v /= dt;
        }

        // hat-convention kernel sum E-hat[f_mu2 Y-hat] (shared inner part)
        let mut s_k = 0.0;
        for (i, yb) in ybar.iter().enumerate() {
            s_k += model.driver.kernel_a2(s.xs[i], s.ys[i]) * yb;
        }
        s_k /= np as f64;

        let in_window = spike.in_window(j);
        let ps = first.p.col(j as i64);
        let qs = first.q.col(j as i64);
        let pps = second.p.col(j as i64);
        let zs = z.col(j as i64);
        let srcc = source.col_mut(j as i64);
        let yc = y.col_mut(j as i64);
        for i in 0..np {
            let da = s.dargs[i];
            let fy = model.driver.dy(da, &s.fctx);
            let fz = model.driver.dz(da, &s.fctx);
            let mf = model.driver.coupling_val(da) * s.fctx.gd * s_k;
            let src = if in_window {
                spike_source(model, spike, &s, i, ps[i], qs[i], pps[i])
            } else {
                0.0
            };
            srcc[i] = src;
            yc[i] = ybar[i] + (fy * ybar[i] + fz * zs[i] + mf + src) * dt;
        }
    }

    Ok(AuxiliarySolution { y, z, source })
}

/// Forward duality process on steps `0 ..= n`:
/// `dGamma = (f_y Gamma + E-hat[f*_mu2 Gamma-hat]) dt + f_z Gamma dW`,
/// `Gamma(0) = 1`, coefficients along the optimal trajectory.
pub fn simulate_gamma(
    model: &CoefficientSet,
    fwd: &ForwardSolution,
    bwd: &BackwardSolution,
    grid: &TimeGrid,
    noise: &BrownianBundle,
) -> Result<PathEnsemble> {
    let n = grid.n();
    let np = noise.particles();
    let dt = grid.dt();
    let mut gamma = PathEnsemble::zeros(np, 0, n as i64);
    gamma.col_mut(0).fill(1.0);

    for j in 0..n {
        let s = star_step(model, fwd, bwd, grid, j);
        // star-convention sum: (1/N) sum_m cpl_f(args_m) Gamma_m
        let gs = gamma.col(j as i64);
        let mut s_cg = 0.0;
        for (da, g) in s.dargs.iter().zip(gs) {
            s_cg += model.driver.coupling_val(*da) * g;
        }
        s_cg /= np as f64;
        let gs = gamma.col(j as i64).to_vec();
        let gc = gamma.col_mut(j as i64 + 1);
        for i in 0..np {
            let da = s.dargs[i];
            let fy = model.driver.dy(da, &s.fctx);
            let fz = model.driver.dz(da, &s.fctx);
            let mf = s.fctx.gd * model.driver.kernel_a2(s.xs[i], s.ys[i]) * s_cg;
            gc[i] = gs[i] + (fy * gs[i] + mf) * dt + fz * gs[i] * noise.increment(i, j);
        }
    }
    Ok(gamma)
}
