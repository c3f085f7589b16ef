//! First- and second-order variational equations around a base trajectory
//! under a spike perturbation of the control, plus the quadratic processes
//! `K = (X^1)^2` and `K_1 = X^1(t) X^1(t-l)` and a diagnostic that their
//! closed dynamics hold on the discretisation.
//!
//! The first variation solves the linear(ised) delayed SDE
//!
//! ```text
//! dX1 = [b_x X1 + b_x' X1(t-l) + E-hat[b_nu X1-hat] + Db 1_E] dt
//!     + [s_x X1 + s_x' X1(t-l) + E-hat[s_nu X1-hat] + Ds 1_E] dW
//! ```
//!
//! with `Db, Ds` the coefficient jumps between the alternate and base control
//! at the base state, and `1_E` the (grid-exact) spike window indicator.  The
//! second variation adds the quadratic local terms, the mixed measure-argument
//! derivative term and the spiked first-derivative jumps.  All cross-particle
//! expectations factorise through the cylindrical coupling, so each step is
//! one shared O(N) pass.

use rayon::prelude::*;

use crate::coeffs::{CoefficientSet, StateArgs, StateCoeff};
use crate::control::SpikeVariation;
use crate::ensemble::PathEnsemble;
use crate::error::Result;
use crate::forward::ForwardSolution;
use crate::grid::TimeGrid;
use crate::rng::BrownianBundle;

/// Everything the variational solvers read per step from the base run.
struct StepCtx<'a> {
    t: f64,
    xs: &'a [f64],
    xds: &'a [f64],
    us: &'a [f64],
    bctx: crate::coeffs::MfCtx,
    sctx: crate::coeffs::MfCtx,
}

fn step_ctx<'a>(
    model: &CoefficientSet,
    base: &'a ForwardSolution,
    grid: &TimeGrid,
    j: usize,
) -> StepCtx<'a> {
    let k = grid.k() as i64;
    let xs = base.x.col(j as i64);
    StepCtx {
        t: grid.time(j as i64),
        xs,
        xds: base.x.col(j as i64 - k),
        us: base.controls.col(j as i64),
        bctx: model.drift.ctx(xs),
        sctx: model.diffusion.ctx(xs),
    }
}

/// Shared kernel sum `(1/N) sum_j h1'(X_j) w_j` for one state coefficient.
fn kernel_sum(c: &StateCoeff, xs: &[f64], w: &[f64]) -> f64 {
    if c.mf.is_none() {
        return 0.0;
    }
    let mut s = 0.0;
    for (&x, &wi) in xs.iter().zip(w) {
        s += c.kernel_d(x) * wi;
    }
    s / xs.len() as f64
}

/// Same with the second kernel derivative: `(1/N) sum_j h1''(X_j) w_j`.
fn kernel_sum2(c: &StateCoeff, xs: &[f64], w: &[f64]) -> f64 {
    if c.mf.is_none() {
        return 0.0;
    }
    let mut s = 0.0;
    for (&x, &wi) in xs.iter().zip(w) {
        s += c.kernel_dd(x) * wi;
    }
    s / xs.len() as f64
}

/// First variational process on steps `-k ..= n` (zero on the initial
/// segment).  `base` must have been simulated under the base policy of
/// `spike` with the same grid and noise.
pub fn simulate_first_variation(
    model: &CoefficientSet,
    spike: &SpikeVariation,
    base: &ForwardSolution,
    grid: &TimeGrid,
    noise: &BrownianBundle,
) -> Result<PathEnsemble> {
    let n = grid.n();
    let k = grid.k() as i64;
    let np = noise.particles();
    let dt = grid.dt();
    let mut x1 = PathEnsemble::zeros(np, -k, n as i64);
    let mut next = vec![0.0f64; np];

    for j in 0..n {
        let c = step_ctx(model, base, grid, j);
        let x1s = x1.col(j as i64);
        let x1ds = x1.col(j as i64 - k);
        let sb = kernel_sum(&model.drift, c.xs, x1s);
        let ss = kernel_sum(&model.diffusion, c.xs, x1s);
        let spiked = spike.in_window(j);
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            let au = StateArgs {
                t: c.t,
                x: c.xs[i],
                xd: c.xds[i],
                v: c.us[i],
            };
            let mut drift = model.drift.dx(au, &c.bctx) * x1s[i]
                + model.drift.dxd(au, &c.bctx) * x1ds[i]
                + model.drift.coupling_val(au) * c.bctx.gd * sb;
            let mut diff = model.diffusion.dx(au, &c.sctx) * x1s[i]
                + model.diffusion.dxd(au, &c.sctx) * x1ds[i]
                + model.diffusion.coupling_val(au) * c.sctx.gd * ss;
            if spiked {
                let av = StateArgs {
                    v: spike.alternate.value(c.t, c.xs[i], c.xds[i]),
                    ..au
                };
                drift += model.drift.val(av, &c.bctx) - model.drift.val(au, &c.bctx);
                diff += model.diffusion.val(av, &c.sctx) - model.diffusion.val(au, &c.sctx);
            }
            *out = x1s[i] + drift * dt + diff * noise.increment(i, j);
        });
        x1.col_mut(j as i64 + 1).copy_from_slice(&next);
    }
    Ok(x1)
}

/// Second variational process on steps `-k ..= n`.
pub fn simulate_second_variation(
    model: &CoefficientSet,
    spike: &SpikeVariation,
    base: &ForwardSolution,
    x1: &PathEnsemble,
    grid: &TimeGrid,
    noise: &BrownianBundle,
) -> Result<PathEnsemble> {
    let n = grid.n();
    let k = grid.k() as i64;
    let np = noise.particles();
    let dt = grid.dt();
    let mut x2 = PathEnsemble::zeros(np, -k, n as i64);
    let mut next = vec![0.0f64; np];
    // scratch for (X1)^2 per step
    let mut x1sq = vec![0.0f64; np];

    for j in 0..n {
        let c = step_ctx(model, base, grid, j);
        let x1s = x1.col(j as i64);
        let x1ds = x1.col(j as i64 - k);
        let x2s = x2.col(j as i64);
        let x2ds = x2.col(j as i64 - k);
        for (q, &v) in x1sq.iter_mut().zip(x1s) {
            *q = v * v;
        }
        // shared sums: first kernel against X2 and X1, second kernel against (X1)^2
        let sb1 = kernel_sum(&model.drift, c.xs, x1s);
        let ss1 = kernel_sum(&model.diffusion, c.xs, x1s);
        let sb2 = kernel_sum(&model.drift, c.xs, x2s);
        let ss2 = kernel_sum(&model.diffusion, c.xs, x2s);
        let sbq = kernel_sum2(&model.drift, c.xs, &x1sq);
        let ssq = kernel_sum2(&model.diffusion, c.xs, &x1sq);
        let spiked = spike.in_window(j);
        next.par_iter_mut().enumerate().for_each(|(i, out)| {
            let au = StateArgs {
                t: c.t,
                x: c.xs[i],
                xd: c.xds[i],
                v: c.us[i],
            };
            let quad = |co: &StateCoeff, ctx: &crate::coeffs::MfCtx| {
                0.5 * co.dxx(au, ctx) * x1sq[i]
                    + co.dxxd(au, ctx) * x1s[i] * x1ds[i]
                    + 0.5 * co.dxdxd(au, ctx) * x1ds[i] * x1ds[i]
            };
            let mut drift = model.drift.dx(au, &c.bctx) * x2s[i]
                + model.drift.dxd(au, &c.bctx) * x2ds[i]
                + model.drift.coupling_val(au) * c.bctx.gd * sb2
                + quad(&model.drift, &c.bctx)
                + 0.5 * model.drift.coupling_val(au) * c.bctx.gd * sbq;
            let mut diff = model.diffusion.dx(au, &c.sctx) * x2s[i]
                + model.diffusion.dxd(au, &c.sctx) * x2ds[i]
                + model.diffusion.coupling_val(au) * c.sctx.gd * ss2
                + quad(&model.diffusion, &c.sctx)
                + 0.5 * model.diffusion.coupling_val(au) * c.sctx.gd * ssq;
            if spiked {
                let av = StateArgs {
                    v: spike.alternate.value(c.t, c.xs[i], c.xds[i]),
                    ..au
                };
                drift += (model.drift.dx(av, &c.bctx) - model.drift.dx(au, &c.bctx)) * x1s[i]
                    + (model.drift.dxd(av, &c.bctx) - model.drift.dxd(au, &c.bctx)) * x1ds[i]
                    + (model.drift.coupling_val(av) - model.drift.coupling_val(au))
                        * c.bctx.gd
                        * sb1;
                diff += (model.diffusion.dx(av, &c.sctx) - model.diffusion.dx(au, &c.sctx))
                    * x1s[i]
                    + (model.diffusion.dxd(av, &c.sctx) - model.diffusion.dxd(au, &c.sctx))
                        * x1ds[i]
                    + (model.diffusion.coupling_val(av) - model.diffusion.coupling_val(au))
                        * c.sctx.gd
                        * ss1;
            }
            *out = x2s[i] + drift * dt + diff * noise.increment(i, j);
        });
        x2.col_mut(j as i64 + 1).copy_from_slice(&next);
    }
    Ok(x2)
}

/// Pointwise quadratic processes `K = (X1)^2` and `K1 = X1(t) X1(t-l)` on
/// steps `0 ..= n`.
pub fn quadratic_processes(x1: &PathEnsemble, grid: &TimeGrid) -> (PathEnsemble, PathEnsemble) {
    let n = grid.n() as i64;
    let k = grid.k() as i64;
    let np = x1.particles();
    let mut kk = PathEnsemble::zeros(np, 0, n);
    let mut k1 = PathEnsemble::zeros(np, 0, n);
    for j in 0..=n {
        let xs = x1.col(j);
        let xds = x1.col(j - k);
        let kc = kk.col_mut(j);
        for (i, out) in kc.iter_mut().enumerate() {
            *out = xs[i] * xs[i];
        }
        let kc = k1.col_mut(j);
        for (i, out) in kc.iter_mut().enumerate() {
            *out = xs[i] * xds[i];
        }
    }
    (kk, k1)
}

/// Integration check of the closed `K` / `K1` dynamics.
#[derive(Debug, Clone)]
pub struct KDynamicsReport {
    /// Mean over particles of `sup_t` |integrated K - direct (X1)^2|.
    pub k_residual: f64,
    /// Same for K1.
    pub k1_residual: f64,
    /// `E[( int |L_i| dt )^2]` for the four remainder groups: drift and
    /// noise remainders of K, then of K1.
    pub l_bounds: [f64; 4],
}

/// Integrate the closed dynamics of `K` and `K1` (main terms plus remainder
/// groups `L_1..L_4`) with the same noise and compare against the direct
/// products.  The residual is pure discretisation error and shrinks like
/// `sqrt(dt)`; the `L` terms carry the spike and mean-field contributions
/// whose integrated squares vanish faster than `eps^2`.
pub fn verify_k_dynamics(
    model: &CoefficientSet,
    spike: &SpikeVariation,
    base: &ForwardSolution,
    x1: &PathEnsemble,
    grid: &TimeGrid,
    noise: &BrownianBundle,
) -> Result<KDynamicsReport> {
    let n = grid.n();
    let k = grid.k() as i64;
    let np = noise.particles();
    let dt = grid.dt();
    let (kk, k1) = quadratic_processes(x1, grid);

    // integrated versions
    let mut ki = vec![0.0f64; np];
    let mut k1i = vec![0.0f64; np];
    let mut k_res = vec![0.0f64; np];
    let mut k1_res = vec![0.0f64; np];
    let mut l_int = vec![[0.0f64; 4]; np];

    for j in 0..n {
        let c = step_ctx(model, base, grid, j);
        let x1s = x1.col(j as i64);
        let x1ds = x1.col(j as i64 - k);
        let sb = kernel_sum(&model.drift, c.xs, x1s);
        let ss = kernel_sum(&model.diffusion, c.xs, x1s);
        let spiked = spike.in_window(j);
        let jd = j as i64 - k; // delayed step index
        let lagged = jd >= 0; // delayed variational dynamics active
        let (cd, sb_d, ss_d, spiked_d) = if lagged {
            let cd = step_ctx(model, base, grid, jd as usize);
            let sbd = kernel_sum(&model.drift, cd.xs, x1.col(jd));
            let ssd = kernel_sum(&model.diffusion, cd.xs, x1.col(jd));
            (Some(cd), sbd, ssd, spike.in_window(jd as usize))
        } else {
            (None, 0.0, 0.0, false)
        };

        for i in 0..np {
            let au = StateArgs {
                t: c.t,
                x: c.xs[i],
                xd: c.xds[i],
                v: c.us[i],
            };
            let bx = model.drift.dx(au, &c.bctx);
            let bxd = model.drift.dxd(au, &c.bctx);
            let sx = model.diffusion.dx(au, &c.sctx);
            let sxd = model.diffusion.dxd(au, &c.sctx);
            let mb = model.drift.coupling_val(au) * c.bctx.gd * sb;
            let ms = model.diffusion.coupling_val(au) * c.sctx.gd * ss;
            let (db, ds) = if spiked {
                let av = StateArgs {
                    v: spike.alternate.value(c.t, c.xs[i], c.xds[i]),
                    ..au
                };
                (
                    model.drift.val(av, &c.bctx) - model.drift.val(au, &c.bctx),
                    model.diffusion.val(av, &c.sctx) - model.diffusion.val(au, &c.sctx),
                )
            } else {
                (0.0, 0.0)
            };

            let kj = ki[i];
            let k1j = k1i[i];
            let kdj = if jd >= 0 {
                kk.at(i, jd)
            } else {
                0.0
            };
            let x1i = x1s[i];
            let x1di = x1ds[i];

            // K dynamics: main + L1 dt, main + L2 dW
            let main_drift =
                2.0 * bx * kj + 2.0 * bxd * k1j + sx * sx * kj + 2.0 * sx * sxd * k1j
                    + sxd * sxd * kdj
                    + ds * ds;
            let l1 = 2.0 * x1i * (mb + db)
                + 2.0 * (sx * x1i + sxd * x1di) * (ms + ds)
                + ms * ms
                + 2.0 * ms * ds;
            let main_noise = 2.0 * sx * kj + 2.0 * sxd * k1j;
            let l2 = 2.0 * x1i * (ms + ds);
            let dw = noise.increment(i, j);
            ki[i] = kj + (main_drift + l1) * dt + (main_noise + l2) * dw;
            l_int[i][0] += l1.abs() * dt;
            l_int[i][1] += l2.abs() * dt;

            // delayed-coefficient quantities at time t-l (zero before 0)
            let (bx_l, sx_l, mb_l, ms_l, db_l, ds_l) = if let Some(cd) = &cd {
                let aul = StateArgs {
                    t: cd.t,
                    x: cd.xs[i],
                    xd: cd.xds[i],
                    v: cd.us[i],
                };
                let mbl = model.drift.coupling_val(aul) * cd.bctx.gd * sb_d;
                let msl = model.diffusion.coupling_val(aul) * cd.sctx.gd * ss_d;
                let (dbl, dsl) = if spiked_d {
                    let avl = StateArgs {
                        v: spike.alternate.value(cd.t, cd.xs[i], cd.xds[i]),
                        ..aul
                    };
                    (
                        model.drift.val(avl, &cd.bctx) - model.drift.val(aul, &cd.bctx),
                        model.diffusion.val(avl, &cd.sctx) - model.diffusion.val(aul, &cd.sctx),
                    )
                } else {
                    (0.0, 0.0)
                };
                (
                    model.drift.dx(aul, &cd.bctx),
                    model.diffusion.dx(aul, &cd.sctx),
                    mbl,
                    msl,
                    dbl,
                    dsl,
                )
            } else {
                (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
            };

            // K1 dynamics
            let main_drift1 = (bx + bx_l + sx * sx_l) * k1j
                + (bxd + sxd * sx_l) * kdj
                + ds * ds_l;
            let l3 = x1di * (mb + db) + x1i * (mb_l + db_l)
                + sx_l * x1di * (ms + ds)
                + (sx * x1i + sxd * x1di) * (ms_l + ds_l)
                + (ms + ds) * (ms_l + ds_l)
                - ds * ds_l;
            let main_noise1 = (sx + sx_l) * k1j + sxd * kdj;
            let l4 = x1di * (ms + ds) + x1i * (ms_l + ds_l);
            k1i[i] = k1j + (main_drift1 + l3) * dt + (main_noise1 + l4) * dw;
            l_int[i][2] += l3.abs() * dt;
            l_int[i][3] += l4.abs() * dt;

            let r = (ki[i] - kk.at(i, j as i64 + 1)).abs();
            if r > k_res[i] {
                k_res[i] = r;
            }
            let r = (k1i[i] - k1.at(i, j as i64 + 1)).abs();
            if r > k1_res[i] {
                k1_res[i] = r;
            }
        }
    }

    let npf = np as f64;
    let mut l_bounds = [0.0f64; 4];
    for li in &l_int {
        for (b, v) in l_bounds.iter_mut().zip(li) {
            *b += v * v / npf;
        }
    }
    Ok(KDynamicsReport {
        k_residual: k_res.iter().sum::<f64>() / npf,
        k1_residual: k1_res.iter().sum::<f64>() / npf,
        l_bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{
        DriverCoeff, DriverPart, StatePart, TermPart, TerminalCoeff, DEFAULT_BLOWUP_GUARD,
    };
    use crate::control::Constant;
    use crate::forward::{simulate_forward, InitialSegment};
    use crate::grid::build_grid;
    use crate::lions::Cylindrical1;
    use std::sync::Arc;

    fn model() -> CoefficientSet {
        CoefficientSet {
            drift: StateCoeff {
                loc: StatePart {
                    f: Box::new(|a| 0.1 * a.x + 0.15 * a.xd + 0.5 * a.v + 0.05 * a.x * a.x),
                    x: Box::new(|a| 0.1 + 0.1 * a.x),
                    xd: Box::new(|_| 0.15),
                    xx: Box::new(|_| 0.1),
                    ..StatePart::zero()
                },
                coupling: StatePart::constant(1.0),
                mf: Some(Cylindrical1::scaled_mean(0.1)),
            },
            diffusion: StateCoeff::local(StatePart {
                f: Box::new(|a| 0.2 * a.x + 0.3 * a.v + 0.05 * a.x * a.v),
                x: Box::new(|a| 0.2 + 0.05 * a.v),
                ..StatePart::zero()
            }),
            driver: DriverCoeff::local(DriverPart::zero()),
            terminal: TerminalCoeff::local(TermPart::zero()),
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    fn setup(
        dt: f64,
        particles: usize,
        eps: f64,
    ) -> (
        CoefficientSet,
        SpikeVariation,
        ForwardSolution,
        crate::grid::TimeGrid,
        BrownianBundle,
    ) {
        let g = build_grid(1.0, 1.5, dt).unwrap();
        let b = BrownianBundle::new(31, particles, &g);
        let spike = SpikeVariation::new(
            Arc::new(Constant(0.0)),
            Arc::new(Constant(1.0)),
            None,
            eps,
            &g,
        );
        let base_only = SpikeVariation::none(spike.base.clone(), spike.alternate.clone());
        let m = model();
        let base = simulate_forward(&m, &base_only, &g, &b, &InitialSegment::constant(1.0)).unwrap();
        (m, spike, base, g, b)
    }

    /// Zero-width spike gives identically zero variations.
    #[test]
    fn zero_spike_zero_variation() {
        let (m, spike, base, g, b) = setup(0.01, 40, 0.0);
        let none = SpikeVariation::none(spike.base.clone(), spike.alternate.clone());
        let x1 = simulate_first_variation(&m, &none, &base, &g, &b).unwrap();
        assert!(x1.raw().iter().all(|v| *v == 0.0));
        let x2 = simulate_second_variation(&m, &none, &base, &x1, &g, &b).unwrap();
        assert!(x2.raw().iter().all(|v| *v == 0.0));
    }

    /// The first variation approximates the pathwise difference of spiked and
    /// base runs to first order in eps.
    #[test]
    fn first_variation_tracks_path_difference() {
        let (m, spike, base, g, b) = setup(0.005, 300, 0.15);
        let spiked = simulate_forward(&m, &spike, &g, &b, &InitialSegment::constant(1.0)).unwrap();
        let x1 = simulate_first_variation(&m, &spike, &base, &g, &b).unwrap();
        let n = g.n() as i64;
        let mut err = 0.0;
        let mut scale = 0.0;
        for i in 0..300 {
            let diff = spiked.x.at(i, n) - base.x.at(i, n);
            err += (diff - x1.at(i, n)).abs();
            scale += diff.abs();
        }
        assert!(
            err < 0.35 * scale,
            "first variation err {err} vs diff scale {scale}"
        );
    }

    /// Including the second variation improves the expansion.
    #[test]
    fn second_variation_improves_expansion() {
        let (m, spike, base, g, b) = setup(0.005, 300, 0.15);
        let spiked = simulate_forward(&m, &spike, &g, &b, &InitialSegment::constant(1.0)).unwrap();
        let x1 = simulate_first_variation(&m, &spike, &base, &g, &b).unwrap();
        let x2 = simulate_second_variation(&m, &spike, &base, &x1, &g, &b).unwrap();
        let n = g.n() as i64;
        let (mut e1, mut e2) = (0.0, 0.0);
        for i in 0..300 {
            let diff = spiked.x.at(i, n) - base.x.at(i, n);
            e1 += (diff - x1.at(i, n)).powi(2);
            e2 += (diff - x1.at(i, n) - x2.at(i, n)).powi(2);
        }
        assert!(e2 < e1, "second-order {e2} should beat first-order {e1}");
    }

    /// Variations vanish identically before the spike window opens.
    #[test]
    fn causality_before_spike() {
        let (m, spike, base, g, b) = setup(0.01, 30, 0.1);
        let x1 = simulate_first_variation(&m, &spike, &base, &g, &b).unwrap();
        for j in -(g.k() as i64)..=(spike.step_lo as i64) {
            assert!(x1.col(j).iter().all(|v| *v == 0.0), "step {j}");
        }
    }

    /// The closed K/K1 dynamics integrate to the direct products up to a
    /// residual that shrinks with dt.
    #[test]
    fn k_dynamics_residual_shrinks() {
        let mut res = Vec::new();
        for dt in [0.02, 0.005] {
            let (m, spike, base, g, b) = setup(dt, 200, 0.15);
            let x1 = simulate_first_variation(&m, &spike, &base, &g, &b).unwrap();
            let r = verify_k_dynamics(&m, &spike, &base, &x1, &g, &b).unwrap();
            // K is order eps, so demand residual well under its scale
            res.push((r.k_residual, r.k1_residual));
        }
        assert!(res[1].0 < 0.7 * res[0].0, "K residuals {res:?}");
        assert!(res[1].1 <= res[0].1 + 1e-12, "K1 residuals {res:?}");
    }

    /// Integrated remainder magnitudes decay faster than eps^2.
    #[test]
    fn l_terms_superquadratic_in_eps() {
        let mut ratios = Vec::new();
        for eps in [0.3, 0.15] {
            let (m, spike, base, g, b) = setup(0.005, 200, eps);
            let x1 = simulate_first_variation(&m, &spike, &base, &g, &b).unwrap();
            let r = verify_k_dynamics(&m, &spike, &base, &x1, &g, &b).unwrap();
            let e = spike.eps();
            ratios.push(r.l_bounds.iter().sum::<f64>() / (e * e));
        }
        assert!(
            ratios[1] < ratios[0],
            "L/eps^2 should decrease: {ratios:?}"
        );
    }
}
