//! The three simulation scenarios and their closed-form counterfactual hazards.

use thiserror::Error;

use crate::math::{expit, expm1};
use crate::msm::{log_rr_with, GridCell};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("unknown scenario {0}; expected 1, 2 or 3")]
    Unknown(u8),
    #[error("invalid simulation setting: {0}")]
    Setting(&'static str),
}

/// Outcome covariate effects `(age, sex, comorbidity)`.
pub const COVARIATE_COEFFS: [f64; 3] = [-0.013, -0.26, 0.425];
/// Uptake model `(intercept, j, j^2, age, sex, comorbidity)`.
pub const UPTAKE_COEFFS: [f64; 6] = [-2.64, 0.25, -0.022, -0.052, 0.03, -0.048];
pub const X1_CENTER: f64 = 86.2;

/// Cells summarized in the replication tables: `VE_j(5)` for
/// `j = 0, 3, 6, 9, 12`, then `VE_5(k)` for `k = 1, 4, 8, 12, 15`.
pub const SUMMARY_CELLS: [GridCell; 10] = [
    GridCell { j: 0, k: 5 },
    GridCell { j: 3, k: 5 },
    GridCell { j: 6, k: 5 },
    GridCell { j: 9, k: 5 },
    GridCell { j: 12, k: 5 },
    GridCell { j: 5, k: 1 },
    GridCell { j: 5, k: 4 },
    GridCell { j: 5, k: 8 },
    GridCell { j: 5, k: 12 },
    GridCell { j: 5, k: 15 },
];

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SimScenario {
    pub id: u8,
    /// Coefficients of `logit lambda` on
    /// `[1, z, kz, k^2 z, c, c^2, cz, c^2 z]` with `c = j + k`.
    pub true_msm: [f64; 8],
    pub covariate_coeffs: [f64; 3],
    pub uptake_coeffs: [f64; 6],
    pub x1_center: f64,
    pub tau: u32,
    pub num_trials: u32,
    pub n: usize,
}

impl SimScenario {
    pub fn new(id: u8) -> Result<Self, ScenarioError> {
        let true_msm = match id {
            1 => [-4.0, -2.5, 0.02, 0.005, 0.0, 0.0, 0.0, 0.0],
            2 => [-4.0, -2.5, 0.0, 0.0, -0.01, -0.003, 0.02, 0.006],
            3 => [-4.0, -2.5, 0.02, 0.005, -0.01, -0.003, 0.02, 0.006],
            other => return Err(ScenarioError::Unknown(other)),
        };
        Ok(SimScenario {
            id,
            true_msm,
            covariate_coeffs: COVARIATE_COEFFS,
            uptake_coeffs: UPTAKE_COEFFS,
            x1_center: X1_CENTER,
            tau: 20,
            num_trials: 13,
            n: 50_000,
        })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.n == 0 {
            return Err(ScenarioError::Setting("n must be positive"));
        }
        if self.num_trials == 0 || self.num_trials > self.tau {
            return Err(ScenarioError::Setting("need 1 <= trials <= tau"));
        }
        Ok(())
    }

    /// `logit lambda^z_j(k)`; defined for any enrollment week `j`.
    pub fn logit_lambda(&self, j: u32, k: u32, z: bool) -> f64 {
        let a = &self.true_msm;
        let (kf, c) = (f64::from(k), f64::from(j + k));
        let base = a[0] + a[4] * c + a[5] * c * c;
        if z {
            base + a[1] + a[2] * kf + a[3] * kf * kf + a[6] * c + a[7] * c * c
        } else {
            base
        }
    }

    pub fn lambda(&self, j: u32, k: u32, z: bool) -> f64 {
        expit(self.logit_lambda(j, k, z))
    }

    pub fn true_log_rr(&self, j: u32, k: u32) -> f64 {
        log_rr_with(k, |m, z| self.lambda(j, m, z)).expect("scenario hazards are positive")
    }

    /// True `VE_j(k)` as a fraction.
    pub fn true_ve(&self, j: u32, k: u32) -> f64 {
        -expm1(self.true_log_rr(j, k))
    }

    /// Outcome linear-predictor shift `c(X)`.
    #[inline]
    pub fn covariate_shift(&self, x: &[f64; 3]) -> f64 {
        let b = &self.covariate_coeffs;
        b[0] * (x[0] - self.x1_center) + b[1] * x[1] + b[2] * x[2]
    }

    /// Weekly uptake probability at calendar week `j`.
    #[inline]
    pub fn uptake_prob(&self, j: u32, x: &[f64; 3]) -> f64 {
        let g = &self.uptake_coeffs;
        let jf = f64::from(j);
        expit(g[0] + g[1] * jf + g[2] * jf * jf + g[3] * (x[0] - self.x1_center) + g[4] * x[1] + g[5] * x[2])
    }
}
