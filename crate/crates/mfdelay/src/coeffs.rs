//! Model coefficients: drift, diffusion, running cost and terminal cost.
//!
//! Every coefficient has the multiplicative-cylindrical form
//!
//! ```text
//! b(t, x, x', nu, v)      = b_loc(t, x, x', v)  +  b_cpl(t, x, x', v) * h0( E_nu[h1] )
//! f(t, x, x', y, z, mu, v)= f_loc(...)          +  f_cpl(...)          * h0( E_mu[h2] )
//! ```
//!
//! which keeps the measure dependence cylindrical (so Lions derivatives are
//! explicit, see [`crate::lions`]) while still allowing the derivative kernel
//! to depend on the local state through the coupling factor.  Crucially, it
//! makes every cross-particle derivative sum factorise into one shared O(N)
//! pass plus per-particle factors, instead of an O(N^2) double loop.
//!
//! Derivatives are hand-coded and cross-checked against central finite
//! differences by [`CoefficientSet::validate_derivatives`].

use crate::ensemble::EmpiricalMeasure;
use crate::error::{MfError, Result};
use crate::lions::{Cylindrical1, Cylindrical2};
use crate::rng::keyed_uniform;

/// Arguments of a state coefficient (drift / diffusion).
#[derive(Debug, Clone, Copy)]
pub struct StateArgs {
    pub t: f64,
    pub x: f64,
    pub xd: f64,
    pub v: f64,
}

/// Arguments of the running cost / BSDE driver.
#[derive(Debug, Clone, Copy)]
pub struct DriverArgs {
    pub t: f64,
    pub x: f64,
    pub xd: f64,
    pub y: f64,
    pub z: f64,
    pub v: f64,
}

pub type StateFn = Box<dyn Fn(StateArgs) -> f64 + Send + Sync>;
pub type DriverFn = Box<dyn Fn(DriverArgs) -> f64 + Send + Sync>;
pub type TermFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;

/// One additive part of a state coefficient with its partial derivatives
/// (`x` = current state, `xd` = delayed state).
pub struct StatePart {
    pub f: StateFn,
    pub x: StateFn,
    pub xd: StateFn,
    pub xx: StateFn,
    pub xxd: StateFn,
    pub xdxd: StateFn,
}

impl StatePart {
    pub fn zero() -> Self {
        StatePart {
            f: Box::new(|_| 0.0),
            x: Box::new(|_| 0.0),
            xd: Box::new(|_| 0.0),
            xx: Box::new(|_| 0.0),
            xxd: Box::new(|_| 0.0),
            xdxd: Box::new(|_| 0.0),
        }
    }

    /// Constant part (useful as a coupling factor).
    pub fn constant(c: f64) -> Self {
        StatePart {
            f: Box::new(move |_| c),
            ..StatePart::zero()
        }
    }
}

/// One additive part of the driver with all partials used by the adjoint
/// equations: gradient in `(x, x', y, z)`, the Hessian over `(x, y, z)` and
/// the second partials involving the delayed state.
pub struct DriverPart {
    pub f: DriverFn,
    pub x: DriverFn,
    pub xd: DriverFn,
    pub y: DriverFn,
    pub z: DriverFn,
    pub xx: DriverFn,
    pub xy: DriverFn,
    pub xz: DriverFn,
    pub yy: DriverFn,
    pub yz: DriverFn,
    pub zz: DriverFn,
    pub xxd: DriverFn,
    pub yxd: DriverFn,
    pub zxd: DriverFn,
    pub xdxd: DriverFn,
}

impl DriverPart {
    pub fn zero() -> Self {
        DriverPart {
            f: Box::new(|_| 0.0),
            x: Box::new(|_| 0.0),
            xd: Box::new(|_| 0.0),
            y: Box::new(|_| 0.0),
            z: Box::new(|_| 0.0),
            xx: Box::new(|_| 0.0),
            xy: Box::new(|_| 0.0),
            xz: Box::new(|_| 0.0),
            yy: Box::new(|_| 0.0),
            yz: Box::new(|_| 0.0),
            zz: Box::new(|_| 0.0),
            xxd: Box::new(|_| 0.0),
            yxd: Box::new(|_| 0.0),
            zxd: Box::new(|_| 0.0),
            xdxd: Box::new(|_| 0.0),
        }
    }

    pub fn constant(c: f64) -> Self {
        DriverPart {
            f: Box::new(move |_| c),
            ..DriverPart::zero()
        }
    }
}

/// Terminal cost part `x -> phi(x)`.
pub struct TermPart {
    pub f: TermFn,
    pub x: TermFn,
    pub xx: TermFn,
}

impl TermPart {
    pub fn zero() -> Self {
        TermPart {
            f: Box::new(|_| 0.0),
            x: Box::new(|_| 0.0),
            xx: Box::new(|_| 0.0),
        }
    }

    pub fn constant(c: f64) -> Self {
        TermPart {
            f: Box::new(move |_| c),
            ..TermPart::zero()
        }
    }
}

/// Precomputed per-step mean-field context of one coefficient: the value and
/// outer derivatives of `h0` at the inner statistic of the current empirical
/// law.  All zero when the coefficient has no measure dependence.
#[derive(Debug, Clone, Copy, Default)]
pub struct MfCtx {
    pub inner: f64,
    pub g: f64,
    pub gd: f64,
    pub gdd: f64,
}

/// Drift or diffusion coefficient.
pub struct StateCoeff {
    pub loc: StatePart,
    pub coupling: StatePart,
    pub mf: Option<Cylindrical1>,
}

impl StateCoeff {
    pub fn local(loc: StatePart) -> Self {
        StateCoeff {
            loc,
            coupling: StatePart::zero(),
            mf: None,
        }
    }

    /// Mean-field context for the empirical law of `xs`.
    pub fn ctx(&self, xs: &[f64]) -> MfCtx {
        match &self.mf {
            None => MfCtx::default(),
            Some(g) => {
                let inner = g.inner(&EmpiricalMeasure::D1(xs));
                MfCtx {
                    inner,
                    g: (g.h0)(inner),
                    gd: (g.h0_d)(inner),
                    gdd: (g.h0_dd)(inner),
                }
            }
        }
    }

    #[inline]
    pub fn val(&self, a: StateArgs, c: &MfCtx) -> f64 {
        (self.loc.f)(a) + (self.coupling.f)(a) * c.g
    }

    #[inline]
    pub fn dx(&self, a: StateArgs, c: &MfCtx) -> f64 {
        (self.loc.x)(a) + (self.coupling.x)(a) * c.g
    }

    #[inline]
    pub fn dxd(&self, a: StateArgs, c: &MfCtx) -> f64 {
        (self.loc.xd)(a) + (self.coupling.xd)(a) * c.g
    }

    #[inline]
    pub fn dxx(&self, a: StateArgs, c: &MfCtx) -> f64 {
        (self.loc.xx)(a) + (self.coupling.xx)(a) * c.g
    }

    #[inline]
    pub fn dxxd(&self, a: StateArgs, c: &MfCtx) -> f64 {
        (self.loc.xxd)(a) + (self.coupling.xxd)(a) * c.g
    }

    #[inline]
    pub fn dxdxd(&self, a: StateArgs, c: &MfCtx) -> f64 {
        (self.loc.xdxd)(a) + (self.coupling.xdxd)(a) * c.g
    }

    /// Measure derivative `d_nu b(args, nu; a)`.
    #[inline]
    pub fn nu(&self, a: StateArgs, c: &MfCtx, at: f64) -> f64 {
        match &self.mf {
            None => 0.0,
            Some(g) => (self.coupling.f)(a) * c.gd * (g.h1_d)(at),
        }
    }

    /// Mixed derivative `d_a d_nu b(args, nu; a)`.
    #[inline]
    pub fn nu_a(&self, a: StateArgs, c: &MfCtx, at: f64) -> f64 {
        match &self.mf {
            None => 0.0,
            Some(g) => (self.coupling.f)(a) * c.gd * (g.h1_dd)(at),
        }
    }

    /// Derivative kernel factor `h1'(at)` (for factorised particle sums).
    #[inline]
    pub fn kernel_d(&self, at: f64) -> f64 {
        match &self.mf {
            None => 0.0,
            Some(g) => (g.h1_d)(at),
        }
    }

    #[inline]
    pub fn kernel_dd(&self, at: f64) -> f64 {
        match &self.mf {
            None => 0.0,
            Some(g) => (g.h1_dd)(at),
        }
    }

    #[inline]
    pub fn coupling_val(&self, a: StateArgs) -> f64 {
        (self.coupling.f)(a)
    }
}

/// Which first-order argument of the driver a cross-derivative is taken in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriverSlot {
    X,
    Xd,
    Y,
    Z,
}

/// Running cost / BSDE driver coefficient.
pub struct DriverCoeff {
    pub loc: DriverPart,
    pub coupling: DriverPart,
    pub mf: Option<Cylindrical2>,
}

impl DriverCoeff {
    pub fn local(loc: DriverPart) -> Self {
        DriverCoeff {
            loc,
            coupling: DriverPart::zero(),
            mf: None,
        }
    }

    /// Mean-field context for the joint empirical law of `(xs, ys)`.
    pub fn ctx(&self, xs: &[f64], ys: &[f64]) -> MfCtx {
        match &self.mf {
            None => MfCtx::default(),
            Some(g) => {
                let inner = g.inner(&EmpiricalMeasure::D2 { a1: xs, a2: ys });
                MfCtx {
                    inner,
                    g: (g.h0)(inner),
                    gd: (g.h0_d)(inner),
                    gdd: (g.h0_dd)(inner),
                }
            }
        }
    }

    #[inline]
    pub fn val(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.f)(a) + (self.coupling.f)(a) * c.g
    }

    #[inline]
    pub fn dx(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.x)(a) + (self.coupling.x)(a) * c.g
    }

    #[inline]
    pub fn dxd(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.xd)(a) + (self.coupling.xd)(a) * c.g
    }

    #[inline]
    pub fn dy(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.y)(a) + (self.coupling.y)(a) * c.g
    }

    #[inline]
    pub fn dz(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.z)(a) + (self.coupling.z)(a) * c.g
    }

    #[inline]
    pub fn dxx(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.xx)(a) + (self.coupling.xx)(a) * c.g
    }

    #[inline]
    pub fn dxy(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.xy)(a) + (self.coupling.xy)(a) * c.g
    }

    #[inline]
    pub fn dxz(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.xz)(a) + (self.coupling.xz)(a) * c.g
    }

    #[inline]
    pub fn dyy(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.yy)(a) + (self.coupling.yy)(a) * c.g
    }

    #[inline]
    pub fn dyz(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.yz)(a) + (self.coupling.yz)(a) * c.g
    }

    #[inline]
    pub fn dzz(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.zz)(a) + (self.coupling.zz)(a) * c.g
    }

    #[inline]
    pub fn dxxd(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.xxd)(a) + (self.coupling.xxd)(a) * c.g
    }

    #[inline]
    pub fn dyxd(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.yxd)(a) + (self.coupling.yxd)(a) * c.g
    }

    #[inline]
    pub fn dzxd(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.zxd)(a) + (self.coupling.zxd)(a) * c.g
    }

    #[inline]
    pub fn dxdxd(&self, a: DriverArgs, c: &MfCtx) -> f64 {
        (self.loc.xdxd)(a) + (self.coupling.xdxd)(a) * c.g
    }

    #[inline]
    pub fn coupling_val(&self, a: DriverArgs) -> f64 {
        (self.coupling.f)(a)
    }

    /// First partial of the coupling factor in the given slot (used by the
    /// mixed local/measure derivative kernels).
    #[inline]
    pub fn coupling_slot(&self, a: DriverArgs, slot: DriverSlot) -> f64 {
        match slot {
            DriverSlot::X => (self.coupling.x)(a),
            DriverSlot::Xd => (self.coupling.xd)(a),
            DriverSlot::Y => (self.coupling.y)(a),
            DriverSlot::Z => (self.coupling.z)(a),
        }
    }

    /// Inner-statistic kernel partials `d h2 / d a_i` at a sample point.
    #[inline]
    pub fn kernel_a1(&self, a1: f64, a2: f64) -> f64 {
        self.mf.as_ref().map_or(0.0, |g| (g.h2_a1)(a1, a2))
    }

    #[inline]
    pub fn kernel_a2(&self, a1: f64, a2: f64) -> f64 {
        self.mf.as_ref().map_or(0.0, |g| (g.h2_a2)(a1, a2))
    }

    #[inline]
    pub fn kernel_a1a1(&self, a1: f64, a2: f64) -> f64 {
        self.mf.as_ref().map_or(0.0, |g| (g.h2_a1a1)(a1, a2))
    }

    #[inline]
    pub fn kernel_a2a2(&self, a1: f64, a2: f64) -> f64 {
        self.mf.as_ref().map_or(0.0, |g| (g.h2_a2a2)(a1, a2))
    }

    /// Measure derivative in component `i` at argument point `(a1, a2)`:
    /// `d_mu_i f(args, mu; a1, a2) = cpl(args) * h0'(m) * d h2 / d a_i`.
    #[inline]
    pub fn mu(&self, a: DriverArgs, c: &MfCtx, i: usize, a1: f64, a2: f64) -> f64 {
        let k = if i == 1 {
            self.kernel_a1(a1, a2)
        } else {
            self.kernel_a2(a1, a2)
        };
        (self.coupling.f)(a) * c.gd * k
    }

    /// Mixed argument derivative `d_{a_i} d_mu_i f`.
    #[inline]
    pub fn mu_a(&self, a: DriverArgs, c: &MfCtx, i: usize, a1: f64, a2: f64) -> f64 {
        let k = if i == 1 {
            self.kernel_a1a1(a1, a2)
        } else {
            self.kernel_a2a2(a1, a2)
        };
        (self.coupling.f)(a) * c.gd * k
    }
}

/// Terminal cost `Phi(x, nu) = phi_loc(x) + phi_cpl(x) * h0(E_nu[h1])`.
pub struct TerminalCoeff {
    pub loc: TermPart,
    pub coupling: TermPart,
    pub mf: Option<Cylindrical1>,
}

impl TerminalCoeff {
    pub fn local(loc: TermPart) -> Self {
        TerminalCoeff {
            loc,
            coupling: TermPart::zero(),
            mf: None,
        }
    }

    pub fn ctx(&self, xs: &[f64]) -> MfCtx {
        match &self.mf {
            None => MfCtx::default(),
            Some(g) => {
                let inner = g.inner(&EmpiricalMeasure::D1(xs));
                MfCtx {
                    inner,
                    g: (g.h0)(inner),
                    gd: (g.h0_d)(inner),
                    gdd: (g.h0_dd)(inner),
                }
            }
        }
    }

    #[inline]
    pub fn val(&self, x: f64, c: &MfCtx) -> f64 {
        (self.loc.f)(x) + (self.coupling.f)(x) * c.g
    }

    #[inline]
    pub fn dx(&self, x: f64, c: &MfCtx) -> f64 {
        (self.loc.x)(x) + (self.coupling.x)(x) * c.g
    }

    #[inline]
    pub fn dxx(&self, x: f64, c: &MfCtx) -> f64 {
        (self.loc.xx)(x) + (self.coupling.xx)(x) * c.g
    }

    #[inline]
    pub fn kernel_d(&self, at: f64) -> f64 {
        self.mf.as_ref().map_or(0.0, |g| (g.h1_d)(at))
    }

    #[inline]
    pub fn kernel_dd(&self, at: f64) -> f64 {
        self.mf.as_ref().map_or(0.0, |g| (g.h1_dd)(at))
    }

    #[inline]
    pub fn coupling_val(&self, x: f64) -> f64 {
        (self.coupling.f)(x)
    }
}

/// Full model: forward coefficients, cost and admissible control values.
pub struct CoefficientSet {
    pub drift: StateCoeff,
    pub diffusion: StateCoeff,
    pub driver: DriverCoeff,
    pub terminal: TerminalCoeff,
    /// Hard guard: any simulated |state| above this aborts the run.
    pub blowup_guard: f64,
}

pub const DEFAULT_BLOWUP_GUARD: f64 = 1e8;

/// Absolute floor and relative scale for derivative cross-checks.
const CHECK_ABS: f64 = 1e-6;
const CHECK_REL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

struct ProbeStream {
    seed: u64,
    count: u64,
}

impl ProbeStream {
    fn next(&mut self, lo: f64, hi: f64) -> f64 {
        self.count += 1;
        lo + (hi - lo) * keyed_uniform(self.seed, 0xB0BE, self.count)
    }
}

fn check(context: &str, analytic: f64, fd: f64) -> Result<()> {
    let tol = CHECK_ABS.max(CHECK_REL * analytic.abs().max(fd.abs()));
    if (analytic - fd).abs() > tol {
        return Err(MfError::ModelInvariant(format!(
            "{context}: hand-coded derivative {analytic:e} vs finite difference {fd:e}"
        )));
    }
    Ok(())
}

fn check_state_part(name: &str, p: &StatePart, pr: &mut ProbeStream) -> Result<()> {
    let a = StateArgs {
        t: pr.next(0.0, 2.0),
        x: pr.next(-2.0, 2.0),
        xd: pr.next(-2.0, 2.0),
        v: pr.next(-2.0, 2.0),
    };
    let hx = FD_STEP * a.x.abs().max(1.0);
    let hxd = FD_STEP * a.xd.abs().max(1.0);
    let fx = |x| (p.f)(StateArgs { x, ..a });
    let fxd = |xd| (p.f)(StateArgs { xd, ..a });
    check(
        &format!("{name}.x"),
        (p.x)(a),
        (fx(a.x + hx) - fx(a.x - hx)) / (2.0 * hx),
    )?;
    check(
        &format!("{name}.xd"),
        (p.xd)(a),
        (fxd(a.xd + hxd) - fxd(a.xd - hxd)) / (2.0 * hxd),
    )?;
    let gx = |x| (p.x)(StateArgs { x, ..a });
    let gxd = |xd| (p.x)(StateArgs { xd, ..a });
    check(
        &format!("{name}.xx"),
        (p.xx)(a),
        (gx(a.x + hx) - gx(a.x - hx)) / (2.0 * hx),
    )?;
    check(
        &format!("{name}.xxd"),
        (p.xxd)(a),
        (gxd(a.xd + hxd) - gxd(a.xd - hxd)) / (2.0 * hxd),
    )?;
    let gd = |xd| (p.xd)(StateArgs { xd, ..a });
    check(
        &format!("{name}.xdxd"),
        (p.xdxd)(a),
        (gd(a.xd + hxd) - gd(a.xd - hxd)) / (2.0 * hxd),
    )?;
    Ok(())
}

fn check_driver_part(name: &str, p: &DriverPart, pr: &mut ProbeStream) -> Result<()> {
    let a = DriverArgs {
        t: pr.next(0.0, 2.0),
        x: pr.next(-2.0, 2.0),
        xd: pr.next(-2.0, 2.0),
        y: pr.next(-2.0, 2.0),
        z: pr.next(-2.0, 2.0),
        v: pr.next(-2.0, 2.0),
    };
    let h = |w: f64| FD_STEP * w.abs().max(1.0);
    let d = |f: &dyn Fn(DriverArgs) -> f64, slot: DriverSlot| {
        let (w, hh) = match slot {
            DriverSlot::X => (a.x, h(a.x)),
            DriverSlot::Xd => (a.xd, h(a.xd)),
            DriverSlot::Y => (a.y, h(a.y)),
            DriverSlot::Z => (a.z, h(a.z)),
        };
        let eval = |w: f64| match slot {
            DriverSlot::X => f(DriverArgs { x: w, ..a }),
            DriverSlot::Xd => f(DriverArgs { xd: w, ..a }),
            DriverSlot::Y => f(DriverArgs { y: w, ..a }),
            DriverSlot::Z => f(DriverArgs { z: w, ..a }),
        };
        (eval(w + hh) - eval(w - hh)) / (2.0 * hh)
    };
    check(&format!("{name}.x"), (p.x)(a), d(&*p.f, DriverSlot::X))?;
    check(&format!("{name}.xd"), (p.xd)(a), d(&*p.f, DriverSlot::Xd))?;
    check(&format!("{name}.y"), (p.y)(a), d(&*p.f, DriverSlot::Y))?;
    check(&format!("{name}.z"), (p.z)(a), d(&*p.f, DriverSlot::Z))?;
    check(&format!("{name}.xx"), (p.xx)(a), d(&*p.x, DriverSlot::X))?;
    check(&format!("{name}.xy"), (p.xy)(a), d(&*p.x, DriverSlot::Y))?;
    check(&format!("{name}.xz"), (p.xz)(a), d(&*p.x, DriverSlot::Z))?;
    check(&format!("{name}.yy"), (p.yy)(a), d(&*p.y, DriverSlot::Y))?;
    check(&format!("{name}.yz"), (p.yz)(a), d(&*p.y, DriverSlot::Z))?;
    check(&format!("{name}.zz"), (p.zz)(a), d(&*p.z, DriverSlot::Z))?;
    check(&format!("{name}.xxd"), (p.xxd)(a), d(&*p.x, DriverSlot::Xd))?;
    check(&format!("{name}.yxd"), (p.yxd)(a), d(&*p.y, DriverSlot::Xd))?;
    check(&format!("{name}.zxd"), (p.zxd)(a), d(&*p.z, DriverSlot::Xd))?;
    check(
        &format!("{name}.xdxd"),
        (p.xdxd)(a),
        d(&*p.xd, DriverSlot::Xd),
    )?;
    Ok(())
}

fn check_term_part(name: &str, p: &TermPart, pr: &mut ProbeStream) -> Result<()> {
    let x = pr.next(-2.0, 2.0);
    let h = FD_STEP * x.abs().max(1.0);
    check(
        &format!("{name}.x"),
        (p.x)(x),
        ((p.f)(x + h) - (p.f)(x - h)) / (2.0 * h),
    )?;
    check(
        &format!("{name}.xx"),
        (p.xx)(x),
        ((p.x)(x + h) - (p.x)(x - h)) / (2.0 * h),
    )?;
    Ok(())
}

fn check_cyl1(name: &str, g: &Cylindrical1, pr: &mut ProbeStream) -> Result<()> {
    let m = pr.next(-1.5, 1.5);
    let x = pr.next(-2.0, 2.0);
    let hm = FD_STEP * m.abs().max(1.0);
    let hx = FD_STEP * x.abs().max(1.0);
    check(
        &format!("{name}.h0'"),
        (g.h0_d)(m),
        ((g.h0)(m + hm) - (g.h0)(m - hm)) / (2.0 * hm),
    )?;
    check(
        &format!("{name}.h0''"),
        (g.h0_dd)(m),
        ((g.h0_d)(m + hm) - (g.h0_d)(m - hm)) / (2.0 * hm),
    )?;
    check(
        &format!("{name}.h1'"),
        (g.h1_d)(x),
        ((g.h1)(x + hx) - (g.h1)(x - hx)) / (2.0 * hx),
    )?;
    check(
        &format!("{name}.h1''"),
        (g.h1_dd)(x),
        ((g.h1_d)(x + hx) - (g.h1_d)(x - hx)) / (2.0 * hx),
    )?;
    Ok(())
}

fn check_cyl2(name: &str, g: &Cylindrical2, pr: &mut ProbeStream) -> Result<()> {
    let m = pr.next(-1.5, 1.5);
    let a1 = pr.next(-2.0, 2.0);
    let a2 = pr.next(-2.0, 2.0);
    let hm = FD_STEP * m.abs().max(1.0);
    let h1 = FD_STEP * a1.abs().max(1.0);
    let h2 = FD_STEP * a2.abs().max(1.0);
    check(
        &format!("{name}.h0'"),
        (g.h0_d)(m),
        ((g.h0)(m + hm) - (g.h0)(m - hm)) / (2.0 * hm),
    )?;
    check(
        &format!("{name}.h0''"),
        (g.h0_dd)(m),
        ((g.h0_d)(m + hm) - (g.h0_d)(m - hm)) / (2.0 * hm),
    )?;
    check(
        &format!("{name}.h2_a1"),
        (g.h2_a1)(a1, a2),
        ((g.h2)(a1 + h1, a2) - (g.h2)(a1 - h1, a2)) / (2.0 * h1),
    )?;
    check(
        &format!("{name}.h2_a2"),
        (g.h2_a2)(a1, a2),
        ((g.h2)(a1, a2 + h2) - (g.h2)(a1, a2 - h2)) / (2.0 * h2),
    )?;
    check(
        &format!("{name}.h2_a1a1"),
        (g.h2_a1a1)(a1, a2),
        ((g.h2_a1)(a1 + h1, a2) - (g.h2_a1)(a1 - h1, a2)) / (2.0 * h1),
    )?;
    check(
        &format!("{name}.h2_a2a2"),
        (g.h2_a2a2)(a1, a2),
        ((g.h2_a2)(a1, a2 + h2) - (g.h2_a2)(a1, a2 - h2)) / (2.0 * h2),
    )?;
    check(
        &format!("{name}.h2_a1a2"),
        (g.h2_a1a2)(a1, a2),
        ((g.h2_a1)(a1, a2 + h2) - (g.h2_a1)(a1, a2 - h2)) / (2.0 * h2),
    )?;
    Ok(())
}

impl CoefficientSet {
    /// Cross-check every hand-coded derivative against central finite
    /// differences at `probes` random argument points.
    pub fn validate_derivatives(&self, probes: usize, seed: u64) -> Result<()> {
        let mut pr = ProbeStream { seed, count: 0 };
        for _ in 0..probes {
            check_state_part("drift.loc", &self.drift.loc, &mut pr)?;
            check_state_part("drift.coupling", &self.drift.coupling, &mut pr)?;
            check_state_part("diffusion.loc", &self.diffusion.loc, &mut pr)?;
            check_state_part("diffusion.coupling", &self.diffusion.coupling, &mut pr)?;
            check_driver_part("driver.loc", &self.driver.loc, &mut pr)?;
            check_driver_part("driver.coupling", &self.driver.coupling, &mut pr)?;
            check_term_part("terminal.loc", &self.terminal.loc, &mut pr)?;
            check_term_part("terminal.coupling", &self.terminal.coupling, &mut pr)?;
            if let Some(g) = &self.drift.mf {
                check_cyl1("drift.mf", g, &mut pr)?;
            }
            if let Some(g) = &self.diffusion.mf {
                check_cyl1("diffusion.mf", g, &mut pr)?;
            }
            if let Some(g) = &self.terminal.mf {
                check_cyl1("terminal.mf", g, &mut pr)?;
            }
            if let Some(g) = &self.driver.mf {
                check_cyl2("driver.mf", g, &mut pr)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> CoefficientSet {
        CoefficientSet {
            drift: StateCoeff {
                loc: StatePart {
                    f: Box::new(|a| 0.1 * a.x + 0.05 * a.xd + a.v),
                    x: Box::new(|_| 0.1),
                    xd: Box::new(|_| 0.05),
                    ..StatePart::zero()
                },
                coupling: StatePart::constant(1.0),
                mf: Some(Cylindrical1::scaled_mean(0.2)),
            },
            diffusion: StateCoeff::local(StatePart {
                f: Box::new(|a| 0.3 * a.x),
                x: Box::new(|_| 0.3),
                ..StatePart::zero()
            }),
            driver: DriverCoeff::local(DriverPart {
                f: Box::new(|a| -0.1 * a.y + 0.5 * a.v * a.v + a.x * a.z),
                x: Box::new(|a| a.z),
                y: Box::new(|_| -0.1),
                z: Box::new(|a| a.x),
                xz: Box::new(|_| 1.0),
                ..DriverPart::zero()
            }),
            terminal: TerminalCoeff::local(TermPart {
                f: Box::new(|x| x * x),
                x: Box::new(|x| 2.0 * x),
                xx: Box::new(|_| 2.0),
            }),
            blowup_guard: DEFAULT_BLOWUP_GUARD,
        }
    }

    #[test]
    fn consistent_derivatives_pass_validation() {
        sample_set().validate_derivatives(100, 5).unwrap();
    }

    #[test]
    fn inconsistent_derivative_detected() {
        let mut c = sample_set();
        c.driver.loc.y = Box::new(|_| -0.2); // wrong on purpose
        let err = c.validate_derivatives(100, 5).unwrap_err();
        assert!(matches!(err, MfError::ModelInvariant(_)), "{err}");
        assert!(err.to_string().contains("driver.loc.y"), "{err}");
    }

    #[test]
    fn mean_field_context_and_value() {
        let c = sample_set();
        let xs = [1.0, 2.0, 3.0];
        let ctx = c.drift.ctx(&xs);
        assert!((ctx.inner - 2.0).abs() < 1e-15);
        assert!((ctx.g - 0.4).abs() < 1e-15);
        let a = StateArgs {
            t: 0.0,
            x: 1.0,
            xd: 2.0,
            v: 0.5,
        };
        // 0.1*1 + 0.05*2 + 0.5 + 1.0 * 0.2 * 2.0
        assert!((c.drift.val(a, &ctx) - 1.1).abs() < 1e-15);
        // measure derivative: coupling * h0' * h1'
        assert!((c.drift.nu(a, &ctx, 9.0) - 0.2).abs() < 1e-15);
        assert_eq!(c.drift.nu_a(a, &ctx, 9.0), 0.0);
        // no mean field on diffusion
        let dctx = c.diffusion.ctx(&xs);
        assert_eq!(c.diffusion.nu(a, &dctx, 1.0), 0.0);
    }
}
