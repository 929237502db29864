//! Small descriptive statistics.

use crate::scalar::Scalar;

pub fn mean<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().copied().sum::<T>() / T::from_usize(xs.len()).unwrap())
}

/// Pearson's r over paired samples. `None` with fewer than three pairs,
/// mismatched lengths, non-finite input, or zero variance on either side.
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Option<T> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return None;
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return None;
    }
    let mx = mean(xs)?;
    let my = mean(ys)?;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy = sxy + dx * dy;
        sxx = sxx + dx * dx;
        syy = syy + dy * dy;
    }
    if sxx <= T::zero() || syy <= T::zero() {
        return None;
    }
    let r = sxy / (sxx * syy).sqrt();
    // Exactly collinear data can land a few ulps short of ±1.
    if T::one() - r.abs() <= T::epsilon() * T::from_f64(4.0).unwrap() {
        return Some(r.signum());
    }
    Some(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Single-pass textbook form, computed independently of `pearson`.
    fn textbook(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let sx: f64 = xs.iter().sum();
        let sy: f64 = ys.iter().sum();
        let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| a * b).sum();
        let sxx: f64 = xs.iter().map(|a| a * a).sum();
        let syy: f64 = ys.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    #[test]
    fn known_values() {
        assert!((pearson(&[1.0f64, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0f64, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0f64, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
        let r32 = pearson(&[1.0f32, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r32 - 0.8).abs() < 1e-6);
    }

    #[test]
    fn collinear_data_is_exact() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.05).collect();
        let down: Vec<f64> = x.iter().map(|v| 0.9 - 2.0 * v).collect();
        let up: Vec<f64> = x.iter().map(|v| 0.1 + 3.0 * v).collect();
        assert_eq!(pearson(&x, &down), Some(-1.0));
        assert_eq!(pearson(&x, &up), Some(1.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), None);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]), None);
        assert_eq!(pearson(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(mean::<f64>(&[]), None);
    }

    proptest! {
        #[test]
        fn matches_textbook(pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40)) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            if let Some(r) = pearson(&xs, &ys) {
                let t = textbook(&xs, &ys);
                prop_assert!((r - t).abs() < 1e-9 || !t.is_finite(), "{r} vs {t}");
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn invariant_under_affine_maps(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30), a in 0.5f64..3.0, b in -5.0f64..5.0) {
            let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            if let (Some(r1), Some(r2)) = (pearson(&xs, &ys), pearson(&scaled, &ys)) {
                prop_assert!((r1 - r2).abs() < 1e-9);
            }
        }
    }
}
