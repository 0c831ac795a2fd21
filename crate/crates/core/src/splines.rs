//! Restricted cubic splines in Harrell's truncated-power parameterization.
//!
//! For knots `t_1 < ... < t_m` the basis has `m - 1` columns: `x` itself and,
//! for `i = 1..m-2`,
//!
//! ```text
//! [(x - t_i)+^3 - (x - t_{m-1})+^3 (t_m - t_i)/(t_m - t_{m-1})
//!               + (x - t_m)+^3 (t_{m-1} - t_i)/(t_m - t_{m-1})] / (t_m - t_1)^2
//! ```
//!
//! Each nonlinear column vanishes left of `t_1` and is linear right of `t_m`.

use alloc::vec::Vec;

use thiserror::Error;

pub const DEFAULT_PERCENTILES: [f64; 4] = [5.0, 35.0, 65.0, 95.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("a restricted cubic spline needs at least 3 knots, got {0}")]
    TooFewKnots(usize),
    #[error("knots must be finite and strictly ascending")]
    UnorderedKnots,
    #[error("need at least {needed} distinct values to place knots, found {found}")]
    TooFewDistinct { needed: usize, found: usize },
    #[error("percentile {0} is outside [0, 100]")]
    BadPercentile(f64),
    #[error("placed knots collapse onto repeated values: {0:?}")]
    TiedKnots(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplineSpec {
    knots: Vec<f64>,
}

impl SplineSpec {
    pub fn new(knots: Vec<f64>) -> Result<Self, SplineError> {
        if knots.len() < 3 {
            return Err(SplineError::TooFewKnots(knots.len()));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SplineError::UnorderedKnots);
        }
        Ok(SplineSpec { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn num_columns(&self) -> usize {
        self.knots.len() - 1
    }
}

/// Type-7 empirical quantile (linear interpolation between order statistics)
/// of an ascending slice, `p` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = libm::floor(h) as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Places knots at the requested empirical percentiles of `values`.
pub fn place_knots(values: &[f64], percentiles: &[f64]) -> Result<SplineSpec, SplineError> {
    let m = percentiles.len();
    if m < 3 {
        return Err(SplineError::TooFewKnots(m));
    }
    if let Some(&p) = percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(SplineError::BadPercentile(p));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let distinct = sorted.windows(2).filter(|w| w[0] != w[1]).count() + usize::from(!sorted.is_empty());
    if distinct < m {
        return Err(SplineError::TooFewDistinct { needed: m, found: distinct });
    }
    let knots: Vec<f64> = percentiles.iter().map(|p| quantile_sorted(&sorted, p / 100.0)).collect();
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SplineError::TiedKnots(knots));
    }
    SplineSpec::new(knots)
}

#[inline]
fn cube_plus(u: f64) -> f64 {
    if u > 0.0 {
        u * u * u
    } else {
        0.0
    }
}

/// Writes the `m - 1` basis values at `x` into `out`.
pub fn rcs_basis_into(x: f64, spec: &SplineSpec, out: &mut [f64]) {
    let t = &spec.knots;
    let m = t.len();
    let (t_last, t_penult) = (t[m - 1], t[m - 2]);
    let norm = (t_last - t[0]) * (t_last - t[0]);
    let tail = t_last - t_penult;
    out[0] = x;
    let c_penult = cube_plus(x - t_penult);
    let c_last = cube_plus(x - t_last);
    for i in 0..m - 2 {
        let v = cube_plus(x - t[i]) - c_penult * (t_last - t[i]) / tail + c_last * (t_penult - t[i]) / tail;
        out[i + 1] = v / norm;
    }
}

pub fn rcs_basis(x: f64, spec: &SplineSpec) -> Vec<f64> {
    let mut out = alloc::vec![0.0; spec.num_columns()];
    rcs_basis_into(x, spec, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn uniform_grid_percentiles() {
        let values: Vec<f64> = (0..=100).map(f64::from).collect();
        let spec = place_knots(&values, &DEFAULT_PERCENTILES).unwrap();
        assert_eq!(spec.knots(), &[5.0, 35.0, 65.0, 95.0]);
    }

    #[test]
    fn constant_values_rejected() {
        assert!(matches!(
            place_knots(&[3.0; 50], &DEFAULT_PERCENTILES),
            Err(SplineError::TooFewDistinct { .. })
        ));
    }

    #[test]
    fn below_first_knot_is_linear_only() {
        let spec = SplineSpec::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = rcs_basis(-0.5, &spec);
        assert_eq!(b, vec![-0.5, 0.0, 0.0]);
    }

    #[test]
    fn hand_evaluated_interior_point() {
        // knots (0,1,2,3), x = 1.5 < t_3 so the restriction terms vanish
        // col1: 1.5^3 / 9, col2: 0.5^3 / 9
        let spec = SplineSpec::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let b = rcs_basis(1.5, &spec);
        assert_relative_eq!(b[1], 3.375 / 9.0, epsilon = 1e-15);
        assert_relative_eq!(b[2], 0.125 / 9.0, epsilon = 1e-15);
    }

    /// Direct evaluation of the unrestricted truncated-power form followed
    /// by the restriction, written independently of `rcs_basis_into`.
    fn reference_basis(x: f64, t: &[f64]) -> Vec<f64> {
        let m = t.len();
        let p = |u: f64| if u > 0.0 { u.powi(3) } else { 0.0 };
        let mut out = vec![x];
        for j in 0..m - 2 {
            let a = (t[m - 1] - t[j]) / (t[m - 1] - t[m - 2]);
            let b = (t[m - 2] - t[j]) / (t[m - 1] - t[m - 2]);
            out.push((p(x - t[j]) - a * p(x - t[m - 2]) + b * p(x - t[m - 1])) / (t[m - 1] - t[0]).powi(2));
        }
        out
    }

    #[test]
    fn matches_reference_parameterization() {
        let knots = vec![1.0, 4.0, 7.5, 12.0, 19.0];
        let spec = SplineSpec::new(knots.clone()).unwrap();
        for i in 0..200 {
            let x = -2.0 + i as f64 * 0.13;
            let (a, b) = (rcs_basis(x, &spec), reference_basis(x, &knots));
            for (u, v) in a.iter().zip(&b) {
                assert_relative_eq!(u, v, epsilon = 1e-12);
            }
        }
    }

    fn second_difference(spec: &SplineSpec, x: f64, h: f64, col: usize) -> f64 {
        let f = |x: f64| rcs_basis(x, spec)[col];
        (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
    }

    #[test]
    fn linear_beyond_last_knot() {
        let spec = SplineSpec::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        for col in 0..3 {
            for x in [3.5, 5.0, 11.0] {
                assert!(second_difference(&spec, x, 0.25, col).abs() < 1e-8);
            }
        }
    }

    proptest! {
        #[test]
        fn continuous_to_second_derivative_at_knots(
            gaps in proptest::collection::vec(0.5f64..5.0, 3..6),
            start in -10.0f64..10.0,
        ) {
            let mut knots = vec![start];
            for g in &gaps { knots.push(knots.last().unwrap() + g); }
            let spec = SplineSpec::new(knots.clone()).unwrap();
            let h = 1e-4;
            for &t in &knots {
                for col in 0..spec.num_columns() {
                    let f = |x: f64| rcs_basis(x, &spec)[col];
                    // value continuity
                    prop_assert!((f(t + 1e-9) - f(t - 1e-9)).abs() < 1e-6);
                    // one-sided first derivatives
                    let dl = (f(t) - f(t - h)) / h;
                    let dr = (f(t + h) - f(t)) / h;
                    prop_assert!((dl - dr).abs() < 1e-3 * (1.0 + dl.abs()));
                    // one-sided second derivatives
                    let sl = (f(t) - 2.0 * f(t - h) + f(t - 2.0 * h)) / (h * h);
                    let sr = (f(t + 2.0 * h) - 2.0 * f(t + h) + f(t)) / (h * h);
                    prop_assert!((sl - sr).abs() < 1e-2 * (1.0 + sl.abs()));
                }
            }
        }

        #[test]
        fn affine_outside_boundary_knots(
            gaps in proptest::collection::vec(0.5f64..5.0, 3..6),
            off in 0.1f64..20.0,
        ) {
            let mut knots = vec![0.0];
            for g in &gaps { knots.push(knots.last().unwrap() + g); }
            let spec = SplineSpec::new(knots.clone()).unwrap();
            let last = *knots.last().unwrap();
            for col in 0..spec.num_columns() {
                let f = |x: f64| rcs_basis(x, &spec)[col];
                for base in [-off, last + off] {
                    let (a, b, c) = (f(base), f(base + 0.05), f(base + 0.1));
                    prop_assert!((a - 2.0 * b + c).abs() < 1e-8 * (1.0 + a.abs()));
                }
            }
        }
    }
}
