//! Quadratic Wasserstein distance between 1-D empirical measures.
//!
//! In one dimension the optimal coupling of two `N`-point empirical measures
//! with equal weights is the sorted (monotone) pairing, so the distance is a
//! sort plus one pass.  Unequal sample counts are handled by resampling the
//! smaller set with replacement up to the larger count, using a deterministic
//! keyed stream so results are reproducible for a given experiment seed.

use crate::error::{MfError, Result};
use crate::rng::keyed_uniform;

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sample"));
    v
}

fn resample(xs: &[f64], target: usize, seed: u64, stream: u64) -> Vec<f64> {
    (0..target)
        .map(|j| {
            let u = keyed_uniform(seed, stream, j as u64);
            xs[((u * xs.len() as f64) as usize).min(xs.len() - 1)]
        })
        .collect()
}

/// `W_2` between the empirical measures of `xs` and `ys`.
///
/// `seed` is only consulted when the sample counts differ.
pub fn wasserstein2_1d(xs: &[f64], ys: &[f64], seed: u64) -> Result<f64> {
    if xs.is_empty() || ys.is_empty() {
        return Err(MfError::DimensionMismatch {
            context: "wasserstein2_1d needs non-empty samples",
            expected: 1,
            got: 0,
        });
    }
    let n = xs.len().max(ys.len());
    let (a, b) = if xs.len() == ys.len() {
        (sorted(xs), sorted(ys))
    } else if xs.len() < ys.len() {
        (sorted(&resample(xs, n, seed, 0)), sorted(ys))
    } else {
        (sorted(xs), sorted(&resample(ys, n, seed, 1)))
    };
    let mut s = 0.0;
    for (u, v) in a.iter().zip(&b) {
        s += (u - v) * (u - v);
    }
    Ok((s / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_checked_values() {
        // point masses: W2(delta_0, delta_3) = 3
        assert!((wasserstein2_1d(&[0.0], &[3.0], 0).unwrap() - 3.0).abs() < 1e-15);
        // two-point vs two-point, sorted pairing (1,2)<->(0,4):
        // sqrt(((1-0)^2 + (2-4)^2)/2) = sqrt(2.5)
        let d = wasserstein2_1d(&[2.0, 1.0], &[4.0, 0.0], 0).unwrap();
        assert!((d - 2.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn unequal_counts_deterministic() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [0.5, 1.5, 2.5, 3.5, 0.0, 1.0, 2.0, 3.0];
        let d1 = wasserstein2_1d(&xs, &ys, 42).unwrap();
        let d2 = wasserstein2_1d(&xs, &ys, 42).unwrap();
        assert_eq!(d1.to_bits(), d2.to_bits());
        assert!(d1 >= 0.0 && d1.is_finite());
    }

    #[test]
    fn empty_rejected() {
        assert!(wasserstein2_1d(&[], &[1.0], 0).is_err());
    }

    proptest! {
        #[test]
        fn identity_of_indiscernibles(xs in proptest::collection::vec(-10.0f64..10.0, 1..50)) {
            let d = wasserstein2_1d(&xs, &xs, 0).unwrap();
            prop_assert!(d == 0.0);
        }

        #[test]
        fn symmetry(
            xs in proptest::collection::vec(-10.0f64..10.0, 5..40),
            ys in proptest::collection::vec(-10.0f64..10.0, 5..40),
        ) {
            // use equal-size prefixes so no resampling asymmetry enters
            let n = xs.len().min(ys.len());
            let a = &xs[..n];
            let b = &ys[..n];
            let d1 = wasserstein2_1d(a, b, 0).unwrap();
            let d2 = wasserstein2_1d(b, a, 0).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-12 * d1.max(1.0));
        }

        #[test]
        fn triangle_inequality(
            xs in proptest::collection::vec(-10.0f64..10.0, 10..30),
            ys in proptest::collection::vec(-10.0f64..10.0, 10..30),
            zs in proptest::collection::vec(-10.0f64..10.0, 10..30),
        ) {
            let n = xs.len().min(ys.len()).min(zs.len());
            let (a, b, c) = (&xs[..n], &ys[..n], &zs[..n]);
            let ab = wasserstein2_1d(a, b, 0).unwrap();
            let bc = wasserstein2_1d(b, c, 0).unwrap();
            let ac = wasserstein2_1d(a, c, 0).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn translation_shifts_by_offset(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..40),
            c in -3.0f64..3.0,
        ) {
            let ys: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let d = wasserstein2_1d(&xs, &ys, 0).unwrap();
            prop_assert!((d - c.abs()).abs() <= 1e-10);
        }
    }
}
