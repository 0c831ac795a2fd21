//! Term builders for functions of a single time variable.

use crate::splines::{rcs_basis_into, SplineSpec};

/// Columns generated from one time variable `t` (trial number, week on
/// trial, or calendar week). The intercept is never included.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TimeBasis {
    /// No columns.
    Empty,
    /// `t, t^2, ..., t^degree`.
    Polynomial(u32),
    /// Restricted cubic spline; `t` plus `m - 2` nonlinear columns.
    Spline(SplineSpec),
    /// Indicators `I(t = 1), ..., I(t = levels - 1)`; level 0 is the reference.
    Indicator(u32),
}

impl TimeBasis {
    pub fn width(&self) -> usize {
        match self {
            TimeBasis::Empty => 0,
            TimeBasis::Polynomial(d) => *d as usize,
            TimeBasis::Spline(s) => s.num_columns(),
            TimeBasis::Indicator(levels) => levels.saturating_sub(1) as usize,
        }
    }

    /// Writes `width()` values for `t` into `out`.
    pub fn write(&self, t: f64, out: &mut [f64]) {
        match self {
            TimeBasis::Empty => {}
            TimeBasis::Polynomial(d) => {
                let mut p = 1.0;
                for slot in out.iter_mut().take(*d as usize) {
                    p *= t;
                    *slot = p;
                }
            }
            TimeBasis::Spline(s) => rcs_basis_into(t, s, out),
            TimeBasis::Indicator(levels) => {
                for (i, slot) in out.iter_mut().take(levels.saturating_sub(1) as usize).enumerate() {
                    *slot = if t == (i + 1) as f64 { 1.0 } else { 0.0 };
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_and_indicator_columns() {
        let mut out = [0.0; 3];
        TimeBasis::Polynomial(3).write(2.0, &mut out);
        assert_eq!(out, [2.0, 4.0, 8.0]);
        let mut ind = [9.0; 2];
        TimeBasis::Indicator(3).write(2.0, &mut ind);
        assert_eq!(ind, [0.0, 1.0]);
        TimeBasis::Indicator(3).write(0.0, &mut ind);
        assert_eq!(ind, [0.0, 0.0]);
    }
}
