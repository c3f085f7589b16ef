//! First- and second-order adjoint equations along the optimal trajectory.
//!
//! Both are anticipated mean-field BSDEs on `[0, T]` with prescribed zero
//! extension on `(T, T + l]`: their drivers read the adjoint processes one
//! delay interval *ahead*, conditionally on the present.  The solvers sweep
//! backward with least-squares Monte Carlo; anticipated terms regress the
//! already-computed step `j + k` values onto time-`t_j` features, and every
//! cross-particle (hatted) expectation factorises through the cylindrical
//! coupling into one shared O(N) sum per step.
//!
//! First adjoint `(p, q)`:
//!
//! ```text
//! -dp = F dt - q dW,     p(T) = Phi_x + E-hat[Phi_nu-star],   p = q = 0 after T,
//! ```
//!
//! with `F` collecting the transposed linearised forward dynamics, the
//! measure-derivative kernels evaluated star-wise, and the conditional
//! anticipated terms.  Second adjoint: a coupled pair `(P, Q)` and
//! `(P_1, Q_1)` for the quadratic processes `(X^1)^2` and `X^1(t)X^1(t-l)`,
//! whose drivers additionally involve the full Hessian of the running cost
//! contracted with `U = (1, p, p sigma_x + q)`.

use crate::coeffs::{CoefficientSet, DriverArgs, StateArgs};
use crate::backward::BackwardSolution;
use crate::ensemble::PathEnsemble;
use crate::error::Result;
use crate::forward::ForwardSolution;
use crate::grid::TimeGrid;
use crate::regression::{RegressionBasis, StepRegression};
use crate::rng::BrownianBundle;

#[derive(Debug)]
pub struct FirstAdjoint {
    /// `p` on steps `0 ..= n + k` (identically zero after step `n`).
    pub p: PathEnsemble,
    /// `q` on steps `0 ..= n + k` (identically zero from step `n` on).
    pub q: PathEnsemble,
}

#[derive(Debug)]
pub struct SecondAdjoint {
    pub p: PathEnsemble,
    pub q: PathEnsemble,
    pub p1: PathEnsemble,
    pub q1: PathEnsemble,
}

/// Per-step coefficient evaluations along the optimal ensemble, shared by
/// the adjoint drivers.
pub(crate) struct StarStep<'a> {
    pub t: f64,
    pub xs: &'a [f64],
    pub xds: &'a [f64],
    pub ys: &'a [f64],
    pub bctx: crate::coeffs::MfCtx,
    pub sctx: crate::coeffs::MfCtx,
    pub fctx: crate::coeffs::MfCtx,
    /// state args per particle (control = realised optimal control)
    pub sargs: Vec<StateArgs>,
    /// driver args per particle
    pub dargs: Vec<DriverArgs>,
}

pub(crate) fn star_step<'a>(
    model: &CoefficientSet,
    fwd: &'a ForwardSolution,
    bwd: &'a BackwardSolution,
    grid: &TimeGrid,
    j: usize,
) -> StarStep<'a> {
    let k = grid.k() as i64;
    let n = grid.n();
    let t = grid.time(j as i64);
    let xs = fwd.x.col(j as i64);
    let xds = fwd.x.col(j as i64 - k);
    let ys = bwd.y.col(j.min(n) as i64);
    let np = xs.len();
    let ustep = j.min(n - 1); // controls defined on 0 .. n-1
    let mut sargs = Vec::with_capacity(np);
    let mut dargs = Vec::with_capacity(np);
    for i in 0..np {
        let v = fwd.control(i, ustep);
        sargs.push(StateArgs {
            t,
            x: xs[i],
            xd: xds[i],
            v,
        });
        dargs.push(DriverArgs {
            t,
            x: xs[i],
            xd: xds[i],
            y: ys[i],
            z: bwd.z_at(i, j as i64),
            v,
        });
    }
    StarStep {
        t,
        xs,
        xds,
        ys,
        bctx: model.drift.ctx(xs),
        sctx: model.diffusion.ctx(xs),
        fctx: model.driver.ctx(xs, ys),
        sargs,
        dargs,
    }
}

/// Terminal slice of the first adjoint: `Phi_x + E-hat[Phi_nu-star]`.
fn terminal_first(model: &CoefficientSet, xt: &[f64], out: &mut [f64]) {
    let tctx = model.terminal.ctx(xt);
    let mut cpl_mean = 0.0;
    for &x in xt {
        cpl_mean += model.terminal.coupling_val(x);
    }
    cpl_mean /= xt.len() as f64;
    for (i, o) in out.iter_mut().enumerate() {
        *o = model.terminal.dx(xt[i], &tctx) + tctx.gd * model.terminal.kernel_d(xt[i]) * cpl_mean;
    }
}

pub fn solve_first_adjoint(
    model: &CoefficientSet,
    fwd: &ForwardSolution,
    bwd: &BackwardSolution,
    grid: &TimeGrid,
    noise: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<FirstAdjoint> {
    let n = grid.n();
    let k = grid.k();
    let np = noise.particles();
    let dt = grid.dt();
    let last = (n + k) as i64;

    let mut p = PathEnsemble::zeros(np, 0, last);
    let mut q = PathEnsemble::zeros(np, 0, last);
    terminal_first(model, fwd.x.col(n as i64), p.col_mut(n as i64));

    let mut pbar = vec![0.0f64; np];
    let mut target = vec![0.0f64; np];
    let mut ant1 = vec![0.0f64; np];
    let mut ant2 = vec![0.0f64; np];
    let mut ant3 = vec![0.0f64; np];

    for j in (0..n).rev() {
        let s = star_step(model, fwd, bwd, grid, j);
        let reg = StepRegression::new(basis, s.xs, s.xds, None)?;
        let pnext = p.col(j as i64 + 1);
        reg.fit_into(pnext, &mut pbar);
        // martingale control variate: centring by the conditional mean keeps
        // the estimator unbiased and strips the O(1/sqrt(N dt)) noise
        for i in 0..np {
            target[i] = (pnext[i] - pbar[i]) * noise.increment(i, j);
        }
        reg.fit_into(&target, q.col_mut(j as i64));
        for v in q.col_mut(j as i64).iter_mut() {
            *v /= dt;
        }

        // anticipated terms: regression of step j + k values on time-t_j
        // features; identically zero once t + l leaves [0, T]
        let m = j + k;
        if m <= n {
            let sm = star_step(model, fwd, bwd, grid, m);
            let pm = p.col(m as i64);
            let qm = q.col(m as i64);
            for i in 0..np {
                let fz = model.driver.dz(sm.dargs[i], &sm.fctx);
                let sxd = model.diffusion.dxd(sm.sargs[i], &sm.sctx);
                let bxd = model.drift.dxd(sm.sargs[i], &sm.bctx);
                target[i] = pm[i] * (fz * sxd + bxd);
            }
            reg.fit_into(&target, &mut ant1);
            for i in 0..np {
                target[i] = qm[i] * model.diffusion.dxd(sm.sargs[i], &sm.sctx);
            }
            reg.fit_into(&target, &mut ant2);
            for (t, da) in target.iter_mut().zip(&sm.dargs) {
                *t = model.driver.dxd(*da, &sm.fctx);
            }
            reg.fit_into(&target, &mut ant3);
        } else {
            ant1.fill(0.0);
            ant2.fill(0.0);
            ant3.fill(0.0);
        }

        // shared star-kernel sums over the hatted particle
        let qs = q.col(j as i64);
        let (mut s_pb, mut s_ps, mut s_qs, mut s_f) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..np {
            let cplb = model.drift.coupling_val(s.sargs[i]);
            let cpls = model.diffusion.coupling_val(s.sargs[i]);
            let fz = model.driver.dz(s.dargs[i], &s.fctx);
            s_pb += pbar[i] * cplb;
            s_ps += pbar[i] * fz * cpls;
            s_qs += qs[i] * cpls;
            s_f += model.driver.coupling_val(s.dargs[i]);
        }
        let npf = np as f64;
        s_pb /= npf;
        s_ps /= npf;
        s_qs /= npf;
        s_f /= npf;

        let pc = p.col_mut(j as i64);
        for i in 0..np {
            let da = s.dargs[i];
            let sa = s.sargs[i];
            let fy = model.driver.dy(da, &s.fctx);
            let fz = model.driver.dz(da, &s.fctx);
            let fx = model.driver.dx(da, &s.fctx);
            let sx = model.diffusion.dx(sa, &s.sctx);
            let bx = model.drift.dx(sa, &s.bctx);
            // star-wise measure kernels evaluated at this particle's point
            let kb = model.drift.kernel_d(s.xs[i]);
            let ks = model.diffusion.kernel_d(s.xs[i]);
            let k2 = model.driver.kernel_a2(s.xs[i], s.ys[i]);
            let k1 = model.driver.kernel_a1(s.xs[i], s.ys[i]);
            let mf_pp = s.sctx.gd * ks * s_ps + s.bctx.gd * kb * s_pb;
            let mf_q = s.sctx.gd * ks * s_qs;
            let mf_mu2 = s.fctx.gd * k2 * s_f;
            let mf_mu1 = s.fctx.gd * k1 * s_f;
            let f_drv = pbar[i] * (fy + mf_mu2 + fz * sx + bx)
                + mf_pp
                + ant1[i]
                + qs[i] * (fz + sx)
                + mf_q
                + ant2[i]
                + fx
                + mf_mu1
                + ant3[i];
            pc[i] = pbar[i] + f_drv * dt;
        }
    }

    Ok(FirstAdjoint { p, q })
}

pub fn solve_second_adjoint(
    model: &CoefficientSet,
    fwd: &ForwardSolution,
    bwd: &BackwardSolution,
    first: &FirstAdjoint,
    grid: &TimeGrid,
    noise: &BrownianBundle,
    basis: &RegressionBasis,
) -> Result<SecondAdjoint> {
    let n = grid.n();
    let k = grid.k();
    let np = noise.particles();
    let dt = grid.dt();
    let last = (n + k) as i64;

    let mut pp = PathEnsemble::zeros(np, 0, last);
    let mut qq = PathEnsemble::zeros(np, 0, last);
    let mut p1 = PathEnsemble::zeros(np, 0, last);
    let mut q1 = PathEnsemble::zeros(np, 0, last);

    // terminal: P(T) = Phi_xx + E-hat[Phi_nu-a-star], P1(T) = 0
    {
        let xt = fwd.x.col(n as i64);
        let tctx = model.terminal.ctx(xt);
        let mut cpl_mean = 0.0;
        for &x in xt {
            cpl_mean += model.terminal.coupling_val(x);
        }
        cpl_mean /= np as f64;
        let pc = pp.col_mut(n as i64);
        for (i, o) in pc.iter_mut().enumerate() {
            *o = model.terminal.dxx(xt[i], &tctx)
                + tctx.gd * model.terminal.kernel_dd(xt[i]) * cpl_mean;
        }
    }

    let mut pbar = vec![0.0f64; np];
    let mut p1bar = vec![0.0f64; np];
    let mut target = vec![0.0f64; np];
    let mut ant = vec![vec![0.0f64; np]; 7];

    for j in (0..n).rev() {
        let s = star_step(model, fwd, bwd, grid, j);
        let reg = StepRegression::new(basis, s.xs, s.xds, None)?;

        let pnext = pp.col(j as i64 + 1);
        reg.fit_into(pnext, &mut pbar);
        // martingale control variate, as in the first-adjoint solve
        for i in 0..np {
            target[i] = (pnext[i] - pbar[i]) * noise.increment(i, j);
        }
        reg.fit_into(&target, qq.col_mut(j as i64));
        for v in qq.col_mut(j as i64).iter_mut() {
            *v /= dt;
        }

        let p1next = p1.col(j as i64 + 1);
        reg.fit_into(p1next, &mut p1bar);
        for i in 0..np {
            target[i] = (p1next[i] - p1bar[i]) * noise.increment(i, j);
        }
        reg.fit_into(&target, q1.col_mut(j as i64));
        for v in q1.col_mut(j as i64).iter_mut() {
            *v /= dt;
        }

        // anticipated targets at step m = j + k
        let m = j + k;
        if m <= n {
            let sm = star_step(model, fwd, bwd, grid, m);
            let pm_2 = pp.col(m as i64);
            let p1m = p1.col(m as i64);
            let q1m = q1.col(m as i64);
            let pm = first.p.col(m as i64);
            let qm = first.q.col(m as i64);
            for i in 0..np {
                let sxd = model.diffusion.dxd(sm.sargs[i], &sm.sctx);
                let bxd = model.drift.dxd(sm.sargs[i], &sm.bctx);
                let sxdxd = model.diffusion.dxdxd(sm.sargs[i], &sm.sctx);
                let bxdxd = model.drift.dxdxd(sm.sargs[i], &sm.bctx);
                let fz = model.driver.dz(sm.dargs[i], &sm.fctx);
                target[i] = pm_2[i] * sxd * sxd;
                ant[0][i] = target[i];
                ant[1][i] = p1m[i] * (sxd + bxd);
                ant[2][i] = p1m[i] * sxd;
                ant[3][i] = q1m[i] * sxd;
                ant[4][i] = pm[i] * (bxdxd + fz * sxdxd);
                ant[5][i] = qm[i] * sxdxd;
                ant[6][i] = model.driver.dxdxd(sm.dargs[i], &sm.fctx);
            }
            for a in ant.iter_mut() {
                let t: Vec<f64> = a.clone();
                reg.fit_into(&t, a);
            }
        } else {
            for a in ant.iter_mut() {
                a.fill(0.0);
            }
        }

        // delayed-time coefficient evaluations for the cross driver G1
        let lagged = j >= k;
        let (l_sargs, l_bctx, l_sctx) = if lagged {
            let jd = j - k;
            let tl = grid.time(jd as i64);
            let xl = fwd.x.col(jd as i64);
            let xdl = fwd.x.col(jd as i64 - k as i64);
            let mut sa = Vec::with_capacity(np);
            for i in 0..np {
                sa.push(StateArgs {
                    t: tl,
                    x: xl[i],
                    xd: xdl[i],
                    v: fwd.control(i, jd),
                });
            }
            (sa, model.drift.ctx(xl), model.diffusion.ctx(xl))
        } else {
            (Vec::new(), Default::default(), Default::default())
        };

        // shared star-kernel sums weighted by the solved first adjoint
        let ps = first.p.col(j as i64);
        let qs1 = first.q.col(j as i64);
        let (mut s_pb, mut s_ps, mut s_qs, mut s_f) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..np {
            let cplb = model.drift.coupling_val(s.sargs[i]);
            let cpls = model.diffusion.coupling_val(s.sargs[i]);
            let fz = model.driver.dz(s.dargs[i], &s.fctx);
            s_pb += ps[i] * cplb;
            s_ps += ps[i] * fz * cpls;
            s_qs += qs1[i] * cpls;
            s_f += model.driver.coupling_val(s.dargs[i]);
        }
        let npf = np as f64;
        s_pb /= npf;
        s_ps /= npf;
        s_qs /= npf;
        s_f /= npf;

        let qs = qq.col(j as i64);
        let q1s = q1.col(j as i64).to_vec();
        let pcol = pp.col_mut(j as i64);
        let p1col = p1.col_mut(j as i64);
        for i in 0..np {
            let da = s.dargs[i];
            let sa = s.sargs[i];
            let fy = model.driver.dy(da, &s.fctx);
            let fz = model.driver.dz(da, &s.fctx);
            let sx = model.diffusion.dx(sa, &s.sctx);
            let bx = model.drift.dx(sa, &s.bctx);
            let sxx = model.diffusion.dxx(sa, &s.sctx);
            let bxx = model.drift.dxx(sa, &s.bctx);
            let sxd_t = model.diffusion.dxd(sa, &s.sctx);
            let bxd_t = model.drift.dxd(sa, &s.bctx);
            let sxxd = model.diffusion.dxxd(sa, &s.sctx);
            let bxxd = model.drift.dxxd(sa, &s.bctx);

            let k2 = model.driver.kernel_a2(s.xs[i], s.ys[i]);
            let mf_mu2 = s.fctx.gd * k2 * s_f;
            let kbdd = model.drift.kernel_dd(s.xs[i]);
            let ksdd = model.diffusion.kernel_dd(s.xs[i]);
            let mf_pa = s.bctx.gd * kbdd * s_pb + s.sctx.gd * ksdd * s_ps;
            let mf_qa = s.sctx.gd * ksdd * s_qs;
            let mf_m1a = s.fctx.gd * model.driver.kernel_a1a1(s.xs[i], s.ys[i]) * s_f;
            let mf_m2a = s.fctx.gd * model.driver.kernel_a2a2(s.xs[i], s.ys[i]) * s_f;

            // Hessian contraction U D2f U^T, U = (1, p, p sigma_x + q)
            let u1 = ps[i];
            let u2 = ps[i] * sx + qs1[i];
            let hess = model.driver.dxx(da, &s.fctx)
                + 2.0 * u1 * model.driver.dxy(da, &s.fctx)
                + 2.0 * u2 * model.driver.dxz(da, &s.fctx)
                + u1 * u1 * model.driver.dyy(da, &s.fctx)
                + 2.0 * u1 * u2 * model.driver.dyz(da, &s.fctx)
                + u2 * u2 * model.driver.dzz(da, &s.fctx);

            let g = pbar[i] * (fy + mf_mu2 + 2.0 * fz * sx + 2.0 * bx + sx * sx)
                + ant[0][i]
                + qs[i] * (fz + 2.0 * sx)
                + 2.0 * ant[1][i]
                + 2.0 * sx * ant[2][i]
                + 2.0 * ant[3][i]
                + ps[i] * (bxx + fz * sxx)
                + mf_pa
                + ant[4][i]
                + qs1[i] * sxx
                + mf_qa
                + ant[5][i]
                + hess
                + ant[6][i]
                + mf_m1a
                + ps[i] * ps[i] * mf_m2a;
            pcol[i] = pbar[i] + g * dt;

            // cross driver G1; delayed coefficients vanish before t = l
            let (bx_l, sx_l) = if lagged {
                (
                    model.drift.dx(l_sargs[i], &l_bctx),
                    model.diffusion.dx(l_sargs[i], &l_sctx),
                )
            } else {
                (0.0, 0.0)
            };
            let g1 = p1bar[i]
                * (bx + bx_l + sx * sx_l + fy + fz * (sxd_t + sx_l) + mf_mu2)
                + q1s[i] * (sx + sx_l + fz)
                + pbar[i] * (bxd_t + sx * sxd_t + fz * sxd_t)
                + qs[i] * sxd_t
                + ps[i]
                    * (bxxd
                        + fz * sxxd
                        + model.driver.dyxd(da, &s.fctx)
                        + sx * model.driver.dzxd(da, &s.fctx))
                + qs1[i] * (sxxd + model.driver.dzxd(da, &s.fctx))
                + model.driver.dxxd(da, &s.fctx);
            p1col[i] = p1bar[i] + g1 * dt;
        }
    }

    Ok(SecondAdjoint { p: pp, q: qq, p1, q1 })
}
