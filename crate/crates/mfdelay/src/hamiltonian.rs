//! The Hamiltonian of the delayed mean-field control problem and the
//! numerical verification of the variational inequality and duality identity.
//!
//! With frozen adjoints `(p, q, P)` and frozen optimal diffusion value
//! `sigma* = sigma(.., u*)`, the Hamiltonian reads
//!
//! ```text
//! H(v) = p b(v) + q sigma(v) + (1/2) P (sigma(v) - sigma*)^2
//!      + f(t, x, xd, y, z + p (sigma(v) - sigma*), mu, v)
//! ```
//!
//! and along an optimal control `H(v) - H(u*) >= 0` for every admissible `v`
//! at (Lebesgue x P) almost every point.  `check_smp_inequality` scans a
//! control grid over sampled time/particle cells; by construction the gap at
//! `v = u*` is exactly zero, so the reported minimum is a clean signed
//! violation measure.

use crate::adjoint::{star_step, FirstAdjoint, SecondAdjoint};
use crate::auxiliary::AuxiliarySolution;
use crate::backward::BackwardSolution;
use crate::coeffs::{CoefficientSet, DriverArgs, MfCtx, StateArgs};
use crate::ensemble::PathEnsemble;
use crate::error::Result;
use crate::forward::ForwardSolution;
use crate::grid::TimeGrid;

/// Frozen state/adjoint data for one Hamiltonian evaluation.
#[derive(Debug, Clone, Copy)]
pub struct HamiltonianPoint {
    pub t: f64,
    pub x: f64,
    pub xd: f64,
    pub y: f64,
    pub z: f64,
    pub p: f64,
    pub q: f64,
    pub big_p: f64,
    /// Diffusion value at the reference (optimal) control.
    pub sigma_star: f64,
}

/// Evaluate the Hamiltonian at control `v`.  The measure contexts must come
/// from the same empirical laws the trajectory was simulated under.
pub fn eval_hamiltonian(
    model: &CoefficientSet,
    pt: &HamiltonianPoint,
    bctx: &MfCtx,
    sctx: &MfCtx,
    fctx: &MfCtx,
    v: f64,
) -> f64 {
    let sa = StateArgs {
        t: pt.t,
        x: pt.x,
        xd: pt.xd,
        v,
    };
    let sig = model.diffusion.val(sa, sctx);
    let ds = sig - pt.sigma_star;
    let da = DriverArgs {
        t: pt.t,
        x: pt.x,
        xd: pt.xd,
        y: pt.y,
        z: pt.z + pt.p * ds,
        v,
    };
    pt.p * model.drift.val(sa, bctx) + pt.q * sig + 0.5 * pt.big_p * ds * ds
        + model.driver.val(da, fctx)
}

/// Options for the inequality scan.
#[derive(Debug, Clone)]
pub struct SmpScanOptions {
    /// Evaluate every `step_stride`-th time step.
    pub step_stride: usize,
    /// Cap on the number of particles scanned per step.
    pub max_particles: usize,
}

impl Default for SmpScanOptions {
    fn default() -> Self {
        SmpScanOptions {
            step_stride: 10,
            max_particles: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmpReport {
    /// Smallest Hamiltonian gap over all scanned cells and control values.
    pub min_gap: f64,
    /// Time and control value attaining the minimum.
    pub argmin_t: f64,
    pub argmin_v: f64,
    /// Standard error of the gap at the minimising (t, v), across particles.
    pub se_gap: f64,
    /// Fraction of scanned cells with a gap below `-3 se_gap`.
    pub violation_fraction: f64,
    /// Number of scanned (time, particle) cells.
    pub cells: usize,
}

impl SmpReport {
    pub fn passes(&self) -> bool {
        self.min_gap >= -3.0 * self.se_gap
    }
}

/// Scan `H(v) - H(u*)` over the control grid at sampled cells along the
/// optimal trajectory.
#[allow(clippy::too_many_arguments)]
pub fn check_smp_inequality(
    model: &CoefficientSet,
    fwd: &ForwardSolution,
    bwd: &BackwardSolution,
    first: &FirstAdjoint,
    second: &SecondAdjoint,
    grid: &TimeGrid,
    control_grid: &[f64],
    opts: &SmpScanOptions,
) -> Result<SmpReport> {
    let n = grid.n();
    let np = fwd.x.particles().min(opts.max_particles);
    let mut min_gap = f64::INFINITY;
    let mut argmin = (0usize, 0.0f64, 0.0f64); // (step, t, v)
    let mut cells = 0usize;
    let mut violations = 0usize;
    // first pass: locate the global minimum
    let mut prelim: Vec<(usize, f64, f64, f64)> = Vec::new(); // step, t, v, gap
    for j in (0..n).step_by(opts.step_stride.max(1)) {
        let s = star_step(model, fwd, bwd, grid, j);
        let ps = first.p.col(j as i64);
        let qs = first.q.col(j as i64);
        let pps = second.p.col(j as i64);
        for i in 0..np {
            let sa = s.sargs[i];
            let pt = HamiltonianPoint {
                t: s.t,
                x: sa.x,
                xd: sa.xd,
                y: s.dargs[i].y,
                z: s.dargs[i].z,
                p: ps[i],
                q: qs[i],
                big_p: pps[i],
                sigma_star: model.diffusion.val(sa, &s.sctx),
            };
            let h_star = eval_hamiltonian(model, &pt, &s.bctx, &s.sctx, &s.fctx, sa.v);
            let mut cell_min = f64::INFINITY;
            let mut cell_arg = sa.v;
            for &v in control_grid {
                let gap = eval_hamiltonian(model, &pt, &s.bctx, &s.sctx, &s.fctx, v) - h_star;
                if gap < cell_min {
                    cell_min = gap;
                    cell_arg = v;
                }
            }
            cells += 1;
            prelim.push((j, s.t, cell_arg, cell_min));
            if cell_min < min_gap {
                min_gap = cell_min;
                argmin = (j, s.t, cell_arg);
            }
        }
    }
    // second pass: standard error of the gap at the minimising (t, v) over
    // the full ensemble
    let (jmin, tmin, vmin) = argmin;
    let s = star_step(model, fwd, bwd, grid, jmin);
    let ps = first.p.col(jmin as i64);
    let qs = first.q.col(jmin as i64);
    let pps = second.p.col(jmin as i64);
    let mut gaps = Vec::with_capacity(fwd.x.particles());
    for i in 0..fwd.x.particles() {
        let sa = s.sargs[i];
        let pt = HamiltonianPoint {
            t: s.t,
            x: sa.x,
            xd: sa.xd,
            y: s.dargs[i].y,
            z: s.dargs[i].z,
            p: ps[i],
            q: qs[i],
            big_p: pps[i],
            sigma_star: model.diffusion.val(sa, &s.sctx),
        };
        let h_star = eval_hamiltonian(model, &pt, &s.bctx, &s.sctx, &s.fctx, sa.v);
        gaps.push(eval_hamiltonian(model, &pt, &s.bctx, &s.sctx, &s.fctx, vmin) - h_star);
    }
    let se_gap = crate::ensemble::std_err(&gaps);
    for (_, _, _, g) in &prelim {
        if *g < -3.0 * se_gap {
            violations += 1;
        }
    }
    Ok(SmpReport {
        min_gap,
        argmin_t: tmin,
        argmin_v: vmin,
        se_gap,
        violation_fraction: violations as f64 / cells.max(1) as f64,
        cells,
    })
}

#[derive(Debug, Clone)]
pub struct DualityReport {
    /// Initial value of the auxiliary equation.
    pub lhs: f64,
    /// Duality-weighted spike source integral `E[ int Gamma source dt ]`.
    pub rhs: f64,
    /// Standard error of the difference (particle-level).
    pub se: f64,
}

impl DualityReport {
    pub fn gap(&self) -> f64 {
        (self.lhs - self.rhs).abs()
    }
}

/// Check the representation of the auxiliary initial value through the
/// duality process.
pub fn check_duality_identity(
    aux: &AuxiliarySolution,
    gamma: &PathEnsemble,
    grid: &TimeGrid,
) -> Result<DualityReport> {
    let n = grid.n();
    let np = gamma.particles();
    let dt = grid.dt();
    let mut per_particle = Vec::with_capacity(np);
    for i in 0..np {
        let mut acc = 0.0;
        for j in 0..n {
            acc += gamma.at(i, j as i64) * aux.source.at(i, j as i64) * dt;
        }
        per_particle.push(acc);
    }
    let rhs = crate::ensemble::mean(&per_particle);
    let lhs = crate::ensemble::mean(aux.y.col(0));
    // difference SE: combine spread of both estimators particle-wise
    let mut diff: Vec<f64> = Vec::with_capacity(np);
    for (i, pp) in per_particle.iter().enumerate() {
        diff.push(aux.y.at(i, 0) - pp);
    }
    Ok(DualityReport {
        lhs,
        rhs,
        se: crate::ensemble::std_err(&diff),
    })
}

#[derive(Debug, Clone)]
pub struct GammaReport {
    pub min: f64,
    pub mean_terminal: f64,
}

/// Positivity scan of the duality process.
pub fn check_gamma_positivity(gamma: &PathEnsemble) -> GammaReport {
    let min = gamma.raw().iter().copied().fold(f64::INFINITY, f64::min);
    GammaReport {
        min,
        mean_terminal: crate::ensemble::mean(gamma.col(gamma.last())),
    }
}

/// Uniform control grid helper (inclusive endpoints).
pub fn control_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    assert!(points >= 2 && hi > lo);
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{
        DriverCoeff, DriverPart, StateCoeff, StatePart, TermPart, TerminalCoeff,
        DEFAULT_BLOWUP_GUARD,
    };

    fn quad_model() -> CoefficientSet {
        // b = x + v, sigma = 0.2 x + 0.5 v, f = 0.5 v^2 - y
        CoefficientSet {
            drift: StateCoeff::local(StatePart {
                f: Box::new(|a| a.x + a.v),
                x: Box::new(|_| 1.0),
                ..StatePart::zero()
            }),
            diffusion: StateCoeff::local(StatePart {
                f: Box::new(|a| 0.2 * a.x + 0.5 * a.v),
                x: Box::new(|_| 0.2),
                ..StatePart::zero()
            }),
            driver: DriverCoeff::local(DriverPart {
                f: Box::new(|a| 0.5 * a.v * a.v - a.y),
                y: Box::new(|_| -1.0),
                ..DriverPart::zero()
            }),
            terminal: TerminalCoeff::local(TermPart::zero()),
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    /// Closed-form check of the Hamiltonian gap for a quadratic model:
    /// H(v) - H(u*) = (p + 0.5 q + 0.5 P s + u*)(v - u*)
    ///              + (1/2)(0.125 P ... ) with s = sigma(v)-sigma(u*) = 0.5 (v - u*):
    /// expand directly instead and compare numerically at a few points.
    #[test]
    fn hamiltonian_value_matches_hand_expansion() {
        let m = quad_model();
        let pt = HamiltonianPoint {
            t: 0.3,
            x: 1.1,
            xd: 0.9,
            y: 0.4,
            z: 0.2,
            p: 0.7,
            q: -0.3,
            big_p: 0.5,
            sigma_star: 0.2 * 1.1 + 0.5 * 2.0, // u* = 2
        };
        let ctx = MfCtx::default();
        let ustar = 2.0;
        let h_star = eval_hamiltonian(&m, &pt, &ctx, &ctx, &ctx, ustar);
        for v in [-1.0, 0.0, 1.0, 3.0] {
            let ds = 0.5 * (v - ustar);
            let expect = pt.p * (v - ustar)
                + pt.q * ds
                + 0.5 * pt.big_p * ds * ds
                + 0.5 * (v * v - ustar * ustar);
            // z-shift enters f only through y/z-independent terms here (f has
            // no z term) so the gap is exactly the polynomial above
            let gap = eval_hamiltonian(&m, &pt, &ctx, &ctx, &ctx, v) - h_star;
            assert!((gap - expect).abs() < 1e-12, "v={v}: {gap} vs {expect}");
        }
    }

    #[test]
    fn control_grid_shape() {
        let g = control_grid(-5.0, 5.0, 101);
        assert_eq!(g.len(), 101);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[100], 5.0);
        assert!((g[50] - 0.0).abs() < 1e-12);
        // u* interior points match grid spacing 0.1
        assert!((g[1] - g[0] - 0.1).abs() < 1e-12);
    }
}
