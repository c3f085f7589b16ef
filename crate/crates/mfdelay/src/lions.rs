//! Cylindrical functionals of measures and their measure derivatives.
//!
//! All mean-field couplings in this crate are cylindrical:
//! `g(nu) = h0( E_nu[h1] )` for scalar marginals, or `h0( E_mu[h2] )` for a
//! joint two-component law.  For these the measure derivative in the sense of
//! lifted L^2 calculus is explicit:
//!
//! ```text
//! d_nu g(nu; a)      = h0'(m) * h1'(a)          m = E_nu[h1]
//! d^2_{nu,a} g(nu;a) = h0'(m) * h1''(a)
//! d^2_{nu,nu} g(nu; a, b) = h0''(m) * h1'(a) * h1'(b)
//! ```
//!
//! Only cylindrical functionals get analytic derivatives; arbitrary measure
//! functionals are supported through the finite-difference oracle
//! [`lions_fd_oracle`], which is also how the analytic formulas are validated.

use crate::ensemble::EmpiricalMeasure;

pub type ScalarFn = Box<dyn Fn(f64) -> f64 + Send + Sync>;
pub type Scalar2Fn = Box<dyn Fn(f64, f64) -> f64 + Send + Sync>;

fn zero1() -> ScalarFn {
    Box::new(|_| 0.0)
}

fn zero2() -> Scalar2Fn {
    Box::new(|_, _| 0.0)
}

/// `g(nu) = h0(E_nu[h1])` on laws of one scalar.
pub struct Cylindrical1 {
    pub h0: ScalarFn,
    pub h0_d: ScalarFn,
    pub h0_dd: ScalarFn,
    pub h1: ScalarFn,
    pub h1_d: ScalarFn,
    pub h1_dd: ScalarFn,
}

impl Cylindrical1 {
    /// `g(nu) = c * E_nu[x]`.
    pub fn scaled_mean(c: f64) -> Self {
        Cylindrical1 {
            h0: Box::new(move |m| c * m),
            h0_d: Box::new(move |_| c),
            h0_dd: zero1(),
            h1: Box::new(|x| x),
            h1_d: Box::new(|_| 1.0),
            h1_dd: zero1(),
        }
    }

    /// Inner statistic `m = E_nu[h1]` of an empirical law (1-D marginal; for a
    /// joint measure the first component is used).
    pub fn inner(&self, mu: &EmpiricalMeasure) -> f64 {
        let xs = match mu {
            EmpiricalMeasure::D1(xs) => xs,
            EmpiricalMeasure::D2 { a1, .. } => a1,
        };
        let mut s = 0.0;
        for &x in *xs {
            s += (self.h1)(x);
        }
        s / xs.len() as f64
    }

    pub fn value_at(&self, inner: f64) -> f64 {
        (self.h0)(inner)
    }

    pub fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        self.value_at(self.inner(mu))
    }
}

/// `g(mu) = h0(E_mu[h2])` on joint laws of two scalars.
pub struct Cylindrical2 {
    pub h0: ScalarFn,
    pub h0_d: ScalarFn,
    pub h0_dd: ScalarFn,
    pub h2: Scalar2Fn,
    pub h2_a1: Scalar2Fn,
    pub h2_a2: Scalar2Fn,
    pub h2_a1a1: Scalar2Fn,
    pub h2_a2a2: Scalar2Fn,
    pub h2_a1a2: Scalar2Fn,
}

impl Cylindrical2 {
    /// `g(mu) = c * E_mu[a2]` (scaled mean of the second component).
    pub fn scaled_second_mean(c: f64) -> Self {
        Cylindrical2 {
            h0: Box::new(move |m| c * m),
            h0_d: Box::new(move |_| c),
            h0_dd: zero1(),
            h2: Box::new(|_, y| y),
            h2_a1: zero2(),
            h2_a2: Box::new(|_, _| 1.0),
            h2_a1a1: zero2(),
            h2_a2a2: zero2(),
            h2_a1a2: zero2(),
        }
    }

    pub fn inner(&self, mu: &EmpiricalMeasure) -> f64 {
        match mu {
            EmpiricalMeasure::D1(xs) => {
                let mut s = 0.0;
                for &x in *xs {
                    s += (self.h2)(x, 0.0);
                }
                s / xs.len() as f64
            }
            EmpiricalMeasure::D2 { a1, a2 } => {
                let mut s = 0.0;
                for (&x, &y) in a1.iter().zip(*a2) {
                    s += (self.h2)(x, y);
                }
                s / a1.len() as f64
            }
        }
    }

    pub fn value_at(&self, inner: f64) -> f64 {
        (self.h0)(inner)
    }

    pub fn value(&self, mu: &EmpiricalMeasure) -> f64 {
        self.value_at(self.inner(mu))
    }
}

/// First measure derivative of a 1-D cylindrical functional at point `a`.
pub fn lions_first(g: &Cylindrical1, mu: &EmpiricalMeasure, a: f64) -> f64 {
    (g.h0_d)(g.inner(mu)) * (g.h1_d)(a)
}

/// Mixed derivative `d/da` of the first measure derivative.
pub fn lions_mixed(g: &Cylindrical1, mu: &EmpiricalMeasure, a: f64) -> f64 {
    (g.h0_d)(g.inner(mu)) * (g.h1_dd)(a)
}

/// Second measure derivative `d^2_{nu,nu} g(nu; a, b)`.
pub fn lions_second_measure(g: &Cylindrical1, mu: &EmpiricalMeasure, a: f64, b: f64) -> f64 {
    (g.h0_dd)(g.inner(mu)) * (g.h1_d)(a) * (g.h1_d)(b)
}

/// Default relative finite-difference step.
pub const FD_REL_STEP: f64 = 1e-5;

/// Finite-difference approximation of the measure derivative of an arbitrary
/// functional of an empirical 1-D law, evaluated at sample `i`.
///
/// The lift of an `N`-point empirical measure is the map from the sample
/// vector; its partial derivative in sample `i` equals `(1/N) d_nu g(mu; x_i)`.
/// This returns `N` times the central difference quotient, i.e. an
/// approximation of `d_nu g(mu; x_i)` directly comparable to [`lions_first`].
pub fn lions_fd_oracle(
    g: impl Fn(&EmpiricalMeasure) -> f64,
    samples: &[f64],
    i: usize,
    step: Option<f64>,
) -> f64 {
    let n = samples.len() as f64;
    let a = samples[i];
    let h = step.unwrap_or(FD_REL_STEP * a.abs().max(1.0));
    let mut work = samples.to_vec();
    work[i] = a + h;
    let up = g(&EmpiricalMeasure::D1(&work));
    work[i] = a - h;
    let down = g(&EmpiricalMeasure::D1(&work));
    n * (up - down) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed_uniform;
    use proptest::prelude::*;

    fn quad_exp() -> Cylindrical1 {
        // g(nu) = exp(E[x^2] / 4)
        Cylindrical1 {
            h0: Box::new(|m| (m / 4.0).exp()),
            h0_d: Box::new(|m| (m / 4.0).exp() / 4.0),
            h0_dd: Box::new(|m| (m / 4.0).exp() / 16.0),
            h1: Box::new(|x| x * x),
            h1_d: Box::new(|x| 2.0 * x),
            h1_dd: Box::new(|_| 2.0),
        }
    }

    #[test]
    fn analytic_matches_fd_oracle() {
        let g = quad_exp();
        let xs: Vec<f64> = (0..50)
            .map(|i| 2.0 * keyed_uniform(9, i, 0) - 1.0)
            .collect();
        let mu = EmpiricalMeasure::D1(&xs);
        for i in [0usize, 13, 49] {
            let fd = lions_fd_oracle(|m| g.value(m), &xs, i, None);
            let an = lions_first(&g, &mu, xs[i]);
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
        }
    }

    #[test]
    fn scaled_mean_derivatives_are_constant() {
        let g = Cylindrical1::scaled_mean(0.05);
        let xs = [1.0, 3.0, -2.0];
        let mu = EmpiricalMeasure::D1(&xs);
        assert!((g.value(&mu) - 0.05 * (2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(lions_first(&g, &mu, 10.0), 0.05);
        assert_eq!(lions_mixed(&g, &mu, 10.0), 0.0);
    }

    #[test]
    fn joint_functional_value() {
        let g = Cylindrical2::scaled_second_mean(2.0);
        let a1 = [0.0, 0.0];
        let a2 = [1.0, 3.0];
        let mu = EmpiricalMeasure::D2 { a1: &a1, a2: &a2 };
        assert!((g.value(&mu) - 4.0).abs() < 1e-15);
    }

    /// Richardson check: halving the FD step must shrink the error of the
    /// oracle against the analytic derivative at roughly second order.  We
    /// assert the fitted log-log slope across steps is comfortably above 0.9
    /// for a family of random smooth functionals.
    #[test]
    fn fd_oracle_richardson_slope() {
        let mut slopes = Vec::new();
        for trial in 0..100u64 {
            // random functional h0(m) = exp(c0 m), h1(x) = sin(c1 x) + c2 x^2
            let c0 = 0.2 + 0.6 * keyed_uniform(17, trial, 0);
            let c1 = 0.5 + keyed_uniform(17, trial, 1);
            let c2 = keyed_uniform(17, trial, 2);
            let g = Cylindrical1 {
                h0: Box::new(move |m| (c0 * m).exp()),
                h0_d: Box::new(move |m| c0 * (c0 * m).exp()),
                h0_dd: Box::new(move |m| c0 * c0 * (c0 * m).exp()),
                h1: Box::new(move |x| (c1 * x).sin() + c2 * x * x),
                h1_d: Box::new(move |x| c1 * (c1 * x).cos() + 2.0 * c2 * x),
                h1_dd: Box::new(move |x| -c1 * c1 * (c1 * x).sin() + 2.0 * c2),
            };
            let xs: Vec<f64> = (0..40)
                .map(|i| 2.0 * keyed_uniform(23, trial * 100 + i, 3) - 1.0)
                .collect();
            let mu = EmpiricalMeasure::D1(&xs);
            let exact = lions_first(&g, &mu, xs[5]);
            let steps = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
            let errs: Vec<f64> = steps
                .iter()
                .map(|&h| {
                    (lions_fd_oracle(|m| g.value(m), &xs, 5, Some(h)) - exact)
                        .abs()
                        .max(1e-16)
                })
                .collect();
            // least-squares slope of log(err) vs log(h)
            let lx: Vec<f64> = steps.iter().map(|h| h.ln()).collect();
            let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
            let mx = lx.iter().sum::<f64>() / 4.0;
            let my = ly.iter().sum::<f64>() / 4.0;
            let slope = lx
                .iter()
                .zip(&ly)
                .map(|(x, y)| (x - mx) * (y - my))
                .sum::<f64>()
                / lx.iter().map(|x| (x - mx) * (x - mx)).sum::<f64>();
            slopes.push(slope);
        }
        let bad = slopes.iter().filter(|s| **s < 0.9).count();
        assert_eq!(bad, 0, "slopes below 0.9: {bad} of {}", slopes.len());
    }

    proptest! {
        /// For linear h0 the second measure derivative vanishes identically.
        #[test]
        fn linear_outer_has_no_second_measure_derivative(
            c in -3.0f64..3.0,
            a in -5.0f64..5.0,
            b in -5.0f64..5.0,
            xs in proptest::collection::vec(-5.0f64..5.0, 1..30),
        ) {
            let g = Cylindrical1::scaled_mean(c);
            let mu = EmpiricalMeasure::D1(&xs);
            prop_assert_eq!(lions_second_measure(&g, &mu, a, b), 0.0);
        }

        /// The measure derivative of a cylindrical functional integrates to
        /// the ordinary derivative of the lifted map along the diagonal:
        /// d/ds h0(E[h1(x + s)]) at s=0 equals E-hat[d_nu g(nu; x-hat)].
        #[test]
        fn shift_derivative_identity(
            xs in proptest::collection::vec(-2.0f64..2.0, 2..25),
        ) {
            let g = quad_exp();
            let mu = EmpiricalMeasure::D1(&xs);
            let lhs: f64 = xs.iter().map(|&x| lions_first(&g, &mu, x)).sum::<f64>() / xs.len() as f64;
            let h = 1e-6;
            let up: Vec<f64> = xs.iter().map(|x| x + h).collect();
            let dn: Vec<f64> = xs.iter().map(|x| x - h).collect();
            let fd = (g.value(&EmpiricalMeasure::D1(&up)) - g.value(&EmpiricalMeasure::D1(&dn))) / (2.0 * h);
            prop_assert!((lhs - fd).abs() <= 1e-6 * lhs.abs().max(1.0));
        }
    }
}
