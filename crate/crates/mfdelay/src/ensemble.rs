//! Particle-path storage and empirical measures.
//!
//! A [`PathEnsemble`] holds one scalar process for `N` particles on a
//! contiguous range of grid steps, stored time-major: the slice for a fixed
//! step is contiguous, which is the access pattern of every per-step
//! operation (coefficient evaluation, regression, empirical sums).

use crate::error::{MfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    particles: usize,
    first: i64,
    cols: usize,
    data: Vec<f64>,
}

impl PathEnsemble {
    /// Zero-initialised ensemble covering steps `first ..= last`.
    pub fn zeros(particles: usize, first: i64, last: i64) -> Self {
        assert!(last >= first, "empty step range");
        let cols = (last - first) as usize + 1;
        PathEnsemble {
            particles,
            first,
            cols,
            data: vec![0.0; particles * cols],
        }
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn first(&self) -> i64 {
        self.first
    }

    pub fn last(&self) -> i64 {
        self.first + self.cols as i64 - 1
    }

    #[inline]
    fn offset(&self, step: i64) -> usize {
        debug_assert!(
            step >= self.first && step <= self.last(),
            "step {step} outside [{}, {}]",
            self.first,
            self.last()
        );
        (step - self.first) as usize * self.particles
    }

    /// All particle values at one step.
    #[inline]
    pub fn col(&self, step: i64) -> &[f64] {
        let o = self.offset(step);
        &self.data[o..o + self.particles]
    }

    #[inline]
    pub fn col_mut(&mut self, step: i64) -> &mut [f64] {
        let o = self.offset(step);
        &mut self.data[o..o + self.particles]
    }

    /// Two distinct columns at once (for stepping `j -> j+1` in place).
    pub fn col_pair_mut(&mut self, a: i64, b: i64) -> (&[f64], &mut [f64]) {
        assert_ne!(a, b);
        let oa = self.offset(a);
        let ob = self.offset(b);
        let n = self.particles;
        if oa < ob {
            let (lo, hi) = self.data.split_at_mut(ob);
            (&lo[oa..oa + n], &mut hi[..n])
        } else {
            let (lo, hi) = self.data.split_at_mut(oa);
            (&hi[..n], &mut lo[ob..ob + n])
        }
    }

    #[inline]
    pub fn at(&self, particle: usize, step: i64) -> f64 {
        self.data[self.offset(step) + particle]
    }

    #[inline]
    pub fn set(&mut self, particle: usize, step: i64, v: f64) {
        let o = self.offset(step);
        self.data[o + particle] = v;
    }

    /// Fill every step in `first ..= 0` from a deterministic initial segment
    /// `t -> x(t)` (same for all particles).
    pub fn fill_initial_segment(&mut self, dt: f64, path: impl Fn(f64) -> f64) {
        let last = self.last().min(0);
        for step in self.first..=last {
            let v = path(step as f64 * dt);
            self.col_mut(step).fill(v);
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// Empirical measure over particle samples: either the law of one scalar
/// marginal or a joint law of two (e.g. state and backward value).
#[derive(Debug, Clone, Copy)]
pub enum EmpiricalMeasure<'a> {
    D1(&'a [f64]),
    D2 { a1: &'a [f64], a2: &'a [f64] },
}

impl<'a> EmpiricalMeasure<'a> {
    pub fn len(&self) -> usize {
        match self {
            EmpiricalMeasure::D1(x) => x.len(),
            EmpiricalMeasure::D2 { a1, .. } => a1.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EmpiricalMeasure::D1([]) => Err(MfError::DimensionMismatch {
                context: "empirical measure must have at least one sample",
                expected: 1,
                got: 0,
            }),
            EmpiricalMeasure::D2 { a1, a2 } if a1.len() != a2.len() => {
                Err(MfError::DimensionMismatch {
                    context: "joint empirical measure marginals",
                    expected: a1.len(),
                    got: a2.len(),
                })
            }
            EmpiricalMeasure::D2 { a1: [], .. } => Err(MfError::DimensionMismatch {
                context: "empirical measure must have at least one sample",
                expected: 1,
                got: 0,
            }),
            _ => Ok(()),
        }
    }
}

/// Mean of `phi` under the measure.  Sums sequentially in particle order so
/// the result is bitwise independent of thread scheduling.
pub fn empirical_expectation(mu: &EmpiricalMeasure, phi: impl Fn(f64, f64) -> f64) -> f64 {
    match mu {
        EmpiricalMeasure::D1(xs) => {
            let mut s = 0.0;
            for &x in *xs {
                s += phi(x, 0.0);
            }
            s / xs.len() as f64
        }
        EmpiricalMeasure::D2 { a1, a2 } => {
            let mut s = 0.0;
            for (&x, &y) in a1.iter().zip(*a2) {
                s += phi(x, y);
            }
            s / a1.len() as f64
        }
    }
}

/// Plain mean of a sample slice.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (denominator `n - 1`).
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// Standard error of the sample mean.
pub fn std_err(xs: &[f64]) -> f64 {
    std_dev(xs) / (xs.len() as f64).sqrt()
}
