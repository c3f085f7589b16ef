//! Least-squares Monte Carlo conditional expectations.
//!
//! The backward solvers approximate conditional expectations given the time-t
//! state by projecting on polynomial features of `(X(t), X(t-l))` (optionally
//! augmented with a backward value).  One [`StepRegression`] factorises the
//! ridge-damped normal equations once per time step; every regression target
//! of that step then reuses the factorisation, which is what keeps the
//! adjoint solvers (which regress up to eight targets per step) cheap.
//!
//! All accumulation runs in fixed particle order so results are bitwise
//! reproducible across thread counts.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{MfError, Result};

/// Feature basis: all monomials `x^a * xd^b` with `a + b <= degree`, plus an
/// optional linear feature in an auxiliary value (e.g. the regressed backward
/// value when a driver depends on it).
#[derive(Debug, Clone)]
pub struct RegressionBasis {
    pub degree: usize,
    pub include_aux: bool,
    pub ridge: f64,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            degree: 2,
            include_aux: false,
            ridge: 1e-8,
        }
    }
}

impl RegressionBasis {
    pub fn feature_count(&self) -> usize {
        let poly = (self.degree + 1) * (self.degree + 2) / 2;
        poly + usize::from(self.include_aux)
    }

    fn fill_features(&self, x: f64, xd: f64, aux: f64, out: &mut [f64]) {
        let mut idx = 0;
        for total in 0..=self.degree {
            for a in (0..=total).rev() {
                let b = total - a;
                out[idx] = x.powi(a as i32) * xd.powi(b as i32);
                idx += 1;
            }
        }
        if self.include_aux {
            out[idx] = aux;
        }
    }
}

/// Factorised per-step regression: build once, fit many targets.
#[derive(Debug)]
pub struct StepRegression {
    n: usize,
    nfeat: usize,
    feats: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl StepRegression {
    /// `aux` must be provided iff the basis includes the auxiliary feature.
    pub fn new(
        basis: &RegressionBasis,
        xs: &[f64],
        xds: &[f64],
        aux: Option<&[f64]>,
    ) -> Result<Self> {
        let n = xs.len();
        let nfeat = basis.feature_count();
        if n < nfeat {
            return Err(MfError::RankDeficient {
                features: nfeat,
                samples: n,
            });
        }
        let mut feats = vec![0.0f64; n * nfeat];
        for i in 0..n {
            let a = aux.map_or(0.0, |a| a[i]);
            basis.fill_features(xs[i], xds[i], a, &mut feats[i * nfeat..(i + 1) * nfeat]);
        }
        // normalised Gram matrix plus ridge
        let mut gram = DMatrix::<f64>::zeros(nfeat, nfeat);
        for i in 0..n {
            let row = &feats[i * nfeat..(i + 1) * nfeat];
            for r in 0..nfeat {
                for c in r..nfeat {
                    gram[(r, c)] += row[r] * row[c];
                }
            }
        }
        let scale = 1.0 / n as f64;
        for r in 0..nfeat {
            for c in r..nfeat {
                let v = gram[(r, c)] * scale;
                gram[(r, c)] = v;
                gram[(c, r)] = v;
            }
            gram[(r, r)] += basis.ridge;
        }
        let chol = Cholesky::new(gram).ok_or(MfError::RankDeficient {
            features: nfeat,
            samples: n,
        })?;
        Ok(StepRegression {
            n,
            nfeat,
            feats,
            chol,
        })
    }

    /// Regression coefficients for one target.
    pub fn coefficients(&self, target: &[f64]) -> DVector<f64> {
        debug_assert_eq!(target.len(), self.n);
        let mut rhs = DVector::<f64>::zeros(self.nfeat);
        for (i, &t) in target.iter().enumerate() {
            let row = &self.feats[i * self.nfeat..(i + 1) * self.nfeat];
            for (r, &f) in row.iter().enumerate() {
                rhs[r] += f * t;
            }
        }
        rhs /= self.n as f64;
        self.chol.solve(&rhs)
    }

    /// Fitted values (projection of the target on the feature span),
    /// written into `out`.
    pub fn fit_into(&self, target: &[f64], out: &mut [f64]) {
        let beta = self.coefficients(target);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.feats[i * self.nfeat..(i + 1) * self.nfeat];
            let mut s = 0.0;
            for (r, &f) in row.iter().enumerate() {
                s += beta[r] * f;
            }
            *o = s;
        }
    }

    pub fn fit(&self, target: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.fit_into(target, &mut out);
        out
    }
}

/// One-off projection of `target` on polynomial features of `(xs, xds)`.
pub fn regress_conditional(
    basis: &RegressionBasis,
    xs: &[f64],
    xds: &[f64],
    target: &[f64],
) -> Result<Vec<f64>> {
    Ok(StepRegression::new(basis, xs, xds, None)?.fit(target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed_uniform, standard_normal};

    #[test]
    fn exact_polynomial_recovered() {
        let basis = RegressionBasis::default();
        let xs: Vec<f64> = (0..200).map(|i| keyed_uniform(1, i, 0) * 4.0 - 2.0).collect();
        let xds: Vec<f64> = (0..200).map(|i| keyed_uniform(1, i, 1) * 4.0 - 2.0).collect();
        let target: Vec<f64> = xs
            .iter()
            .zip(&xds)
            .map(|(x, xd)| 1.0 - 2.0 * x + 0.5 * x * xd + 3.0 * xd * xd)
            .collect();
        let fit = regress_conditional(&basis, &xs, &xds, &target).unwrap();
        for (f, t) in fit.iter().zip(&target) {
            assert!((f - t).abs() < 1e-5, "{f} vs {t}");
        }
    }

    #[test]
    fn conditional_expectation_of_noisy_target() {
        let basis = RegressionBasis::default();
        let n = 50_000;
        let xs: Vec<f64> = (0..n).map(|i| standard_normal(2, i as u64, 0)).collect();
        let xds = vec![0.0f64; n];
        // target = x^2 + independent noise; E[target | x] = x^2
        let target: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| x * x + standard_normal(3, i as u64, 1))
            .collect();
        let fit = regress_conditional(&basis, &xs, &xds, &target).unwrap();
        let mut err = 0.0;
        for (f, x) in fit.iter().zip(&xs) {
            err += (f - x * x).powi(2);
        }
        err = (err / n as f64).sqrt();
        assert!(err < 0.05, "rms error {err}");
    }

    #[test]
    fn auxiliary_feature_used() {
        let basis = RegressionBasis {
            include_aux: true,
            ..RegressionBasis::default()
        };
        let xs: Vec<f64> = (0..100).map(|i| keyed_uniform(5, i, 0) * 2.0).collect();
        let xds = vec![0.0f64; 100];
        let aux: Vec<f64> = (0..100).map(|i| (keyed_uniform(5, i, 1) * 7.0).sin()).collect();
        let target: Vec<f64> = xs.iter().zip(&aux).map(|(x, a)| x + 2.0 * a).collect();
        let reg = StepRegression::new(&basis, &xs, &xds, Some(&aux)).unwrap();
        let fit = reg.fit(&target);
        for (f, t) in fit.iter().zip(&target) {
            assert!((f - t).abs() < 1e-5);
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let basis = RegressionBasis::default();
        let err = StepRegression::new(&basis, &[1.0, 2.0], &[0.0, 0.0], None).unwrap_err();
        assert!(matches!(err, MfError::RankDeficient { .. }));
    }

    #[test]
    fn singular_design_without_ridge_rejected() {
        let basis = RegressionBasis {
            ridge: 0.0,
            ..RegressionBasis::default()
        };
        // constant samples: all non-intercept columns collinear
        let xs = vec![1.0f64; 50];
        let xds = vec![1.0f64; 50];
        let err = StepRegression::new(&basis, &xs, &xds, None).unwrap_err();
        assert!(matches!(err, MfError::RankDeficient { .. }));
        // with the default ridge it factorises
        let basis = RegressionBasis::default();
        assert!(StepRegression::new(&basis, &xs, &xds, None).is_ok());
    }

    #[test]
    fn shared_factorisation_matches_oneoff() {
        let basis = RegressionBasis::default();
        let xs: Vec<f64> = (0..80).map(|i| keyed_uniform(9, i, 0)).collect();
        let xds: Vec<f64> = (0..80).map(|i| keyed_uniform(9, i, 1)).collect();
        let t1: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let t2: Vec<f64> = xds.iter().map(|x| x.cos()).collect();
        let reg = StepRegression::new(&basis, &xs, &xds, None).unwrap();
        let f1 = reg.fit(&t1);
        let f2 = reg.fit(&t2);
        assert_eq!(f1, regress_conditional(&basis, &xs, &xds, &t1).unwrap());
        assert_eq!(f2, regress_conditional(&basis, &xs, &xds, &t2).unwrap());
    }
}
