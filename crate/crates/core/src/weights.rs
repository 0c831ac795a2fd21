//! Propensity and censoring-hazard nuisance models and the inverse
//! probability weights built from them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cohort::Panel;
use crate::glm::{fit_weighted_logistic, FitResult, GlmError};
use crate::linalg::{dot, Matrix};
use crate::math::expit;
use crate::splines::quantile_sorted;
use crate::terms::TimeBasis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("{model} model: {source}")]
    Fit {
        model: &'static str,
        #[source]
        source: GlmError,
    },
    #[error("{0} model has no rows to fit")]
    NoRows(&'static str),
    #[error("propensity model: every person-trial in trial {trial} has Z = {z}; the trial stratum is separated")]
    UniformTrial { trial: u32, z: u8 },
    #[error("censoring model: no censoring is observed in the modeled arms; drop the censoring model to use unit censoring weights")]
    NoCensoring,
    #[error("covariate index {index} out of range for {available} covariates")]
    Covariate { index: usize, available: usize },
    #[error("positivity violation at person {id}, trial {j}, week {k}: {what} = {value}")]
    Positivity { id: String, j: u32, k: u32, what: &'static str, value: f64 },
    #[error("truncation percentile {0} must lie in (0, 50)")]
    Truncation(f64),
}

/// Design of `e_j(X) = expit(zeta . g(j, X))`: intercept, trial-number terms,
/// then the selected covariates.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PropensitySpec {
    pub trial_basis: TimeBasis,
    pub covariates: Vec<usize>,
}

impl PropensitySpec {
    pub fn width(&self) -> usize {
        1 + self.trial_basis.width() + self.covariates.len()
    }

    pub fn write_row(&self, j: u32, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        let tw = self.trial_basis.width();
        self.trial_basis.write(f64::from(j), &mut out[1..1 + tw]);
        for (slot, &c) in out[1 + tw..].iter_mut().zip(&self.covariates) {
            *slot = x[c];
        }
    }
}

/// Which arms the censoring model is fitted on. Rows of an unmodeled arm
/// get `d = 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CensoredArms {
    Both,
    ComparatorOnly,
}

/// Design of `d_jk(z, X) = P(R_j(k) = 1 | at risk)`: intercept, trial-number,
/// week-on-trial and calendar-week terms, an optional regimen indicator and
/// the selected covariates.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CensoringSpec {
    pub trial_basis: TimeBasis,
    pub trial_time_basis: TimeBasis,
    pub calendar_basis: TimeBasis,
    pub regimen_term: bool,
    pub covariates: Vec<usize>,
    pub arms: CensoredArms,
}

impl CensoringSpec {
    pub fn width(&self) -> usize {
        1 + self.trial_basis.width()
            + self.trial_time_basis.width()
            + self.calendar_basis.width()
            + usize::from(self.regimen_term)
            + self.covariates.len()
    }

    #[inline]
    pub fn models_arm(&self, z: bool) -> bool {
        match self.arms {
            CensoredArms::Both => true,
            CensoredArms::ComparatorOnly => !z,
        }
    }

    pub fn write_row(&self, j: u32, k: u32, z: bool, x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
        let mut at = 1;
        for (basis, t) in [
            (&self.trial_basis, j),
            (&self.trial_time_basis, k),
            (&self.calendar_basis, j + k),
        ] {
            let w = basis.width();
            basis.write(f64::from(t), &mut out[at..at + w]);
            at += w;
        }
        if self.regimen_term {
            out[at] = if z { 1.0 } else { 0.0 };
            at += 1;
        }
        for (slot, &c) in out[at..].iter_mut().zip(&self.covariates) {
            *slot = x[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NuisanceFits {
    pub zeta: FitResult,
    /// `None` when censoring weights are fixed at 1.
    pub kappa: Option<FitResult>,
    pub spec_g: PropensitySpec,
    pub spec_h: Option<CensoringSpec>,
}

fn check_covariates(panel: &Panel, idx: &[usize]) -> Result<(), WeightError> {
    match idx.iter().find(|&&c| c >= panel.num_covariates) {
        Some(&index) => Err(WeightError::Covariate { index, available: panel.num_covariates }),
        None => Ok(()),
    }
}

/// Row indices entering the propensity model (the `k = 0` row of every person-trial).
pub fn propensity_rows(panel: &Panel) -> Vec<usize> {
    (0..panel.rows.len()).filter(|&i| panel.rows[i].k == 0).collect()
}

/// Row indices entering the censoring model: at-risk weeks `k >= 1` in modeled arms.
pub fn censoring_rows(panel: &Panel, spec: &CensoringSpec) -> Vec<usize> {
    (0..panel.rows.len())
        .filter(|&i| {
            let r = &panel.rows[i];
            r.at_risk && spec.models_arm(r.z)
        })
        .collect()
}

/// Pooled logistic regression of `Z_j` on `g(j, X)` over the `k = 0` rows.
pub fn fit_propensity(panel: &Panel, spec: &PropensitySpec) -> Result<FitResult, WeightError> {
    check_covariates(panel, &spec.covariates)?;
    let rows = propensity_rows(panel);
    if rows.is_empty() {
        return Err(WeightError::NoRows("propensity"));
    }
    let mut counts: Vec<[usize; 2]> = Vec::new();
    for &i in &rows {
        let r = &panel.rows[i];
        let j = r.j as usize;
        if counts.len() <= j {
            counts.resize(j + 1, [0, 0]);
        }
        counts[j][usize::from(r.z)] += 1;
    }
    for (j, c) in counts.iter().enumerate() {
        if c[0] + c[1] > 0 && (c[0] == 0 || c[1] == 0) {
            return Err(WeightError::UniformTrial { trial: j as u32, z: u8::from(c[0] == 0) });
        }
    }
    let q = spec.width();
    let mut design = Matrix::zeros(rows.len(), q);
    let mut y = Vec::with_capacity(rows.len());
    for (n, &i) in rows.iter().enumerate() {
        let r = &panel.rows[i];
        spec.write_row(r.j, panel.x(r.person), design.row_mut(n));
        y.push(if r.z { 1.0 } else { 0.0 });
    }
    fit_weighted_logistic(&design, &y, &vec![1.0; rows.len()])
        .map_err(|source| WeightError::Fit { model: "propensity", source })
}

/// Censoring-model rows collapsed to distinct designs. When the design sees
/// time only through the calendar week, a person's rows from different
/// trials with the same calendar week and arm share one group; the binomial
/// likelihood is unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct CensoringGroups {
    /// Group of every panel row; `u32::MAX` for rows outside the model.
    pub group_of_row: Vec<u32>,
    pub design: Matrix,
    pub count: Vec<f64>,
    pub uncensored: Vec<f64>,
}

pub fn censoring_groups(panel: &Panel, spec: &CensoringSpec) -> CensoringGroups {
    let calendar_only = spec.trial_basis.is_empty() && spec.trial_time_basis.is_empty();
    let width = spec.width();
    let mut group_of_row = vec![u32::MAX; panel.rows.len()];
    let mut data = Vec::new();
    let (mut count, mut uncensored) = (Vec::new(), Vec::new());
    let max_cal = panel.rows.iter().map(|r| r.j + r.k).max().unwrap_or(0) as usize;
    let mut slot = vec![u32::MAX; 2 * (max_cal + 1)];
    let mut touched: Vec<usize> = Vec::new();
    let mut person = u32::MAX;
    for (i, r) in panel.rows.iter().enumerate() {
        if !(r.at_risk && spec.models_arm(r.z)) {
            continue;
        }
        if r.person != person {
            person = r.person;
            for &t in &touched {
                slot[t] = u32::MAX;
            }
            touched.clear();
        }
        let key = 2 * (r.j + r.k) as usize + usize::from(r.z);
        let g = if calendar_only && slot[key] != u32::MAX {
            slot[key]
        } else {
            let g = count.len() as u32;
            let at = data.len();
            data.resize(at + width, 0.0);
            spec.write_row(r.j, r.k, r.z, panel.x(r.person), &mut data[at..]);
            count.push(0.0);
            uncensored.push(0.0);
            if calendar_only {
                slot[key] = g;
                touched.push(key);
            }
            g
        };
        group_of_row[i] = g;
        count[g as usize] += 1.0;
        if r.r {
            uncensored[g as usize] += 1.0;
        }
    }
    let design = Matrix::from_row_major(count.len(), width, data);
    CensoringGroups { group_of_row, design, count, uncensored }
}

/// Pooled logistic regression of `R_j(k)` on `h(j, k, Z_j, X)` over at-risk weeks.
pub fn fit_censoring(panel: &Panel, spec: &CensoringSpec) -> Result<FitResult, WeightError> {
    check_covariates(panel, &spec.covariates)?;
    let groups = censoring_groups(panel, spec);
    if groups.count.is_empty() {
        return Err(WeightError::NoRows("censoring"));
    }
    if groups.count == groups.uncensored {
        return Err(WeightError::NoCensoring);
    }
    let y: Vec<f64> = groups.uncensored.iter().zip(&groups.count).map(|(u, c)| u / c).collect();
    fit_weighted_logistic(&groups.design, &y, &groups.count)
        .map_err(|source| WeightError::Fit { model: "censoring", source })
}

/// `[prod_m d]^{-1} [Z / e + (1 - Z) / (1 - e)]`, with `cum_d` the product.
#[inline]
pub fn ip_weight(z: bool, e: f64, cum_d: f64) -> f64 {
    let treat = if z { 1.0 / e } else { 1.0 / (1.0 - e) };
    treat / cum_d
}

/// `e_j(X)` for every row (constant within a person-trial).
pub fn propensity_by_row(panel: &Panel, spec: &PropensitySpec, zeta: &[f64]) -> Vec<f64> {
    let mut buf = vec![0.0; spec.width()];
    let mut out = vec![0.0; panel.rows.len()];
    let mut current = 0.0;
    for (i, r) in panel.rows.iter().enumerate() {
        if r.k == 0 {
            spec.write_row(r.j, panel.x(r.person), &mut buf);
            current = expit(dot(&buf, zeta));
        }
        out[i] = current;
    }
    out
}

/// Cumulative `prod_{m <= k} d_jm` for every row (1 at `k = 0` and in unmodeled arms).
pub fn cumulative_uncensored_by_row(panel: &Panel, spec: &CensoringSpec, kappa: &[f64]) -> Vec<f64> {
    let mut buf = vec![0.0; spec.width()];
    let mut out = vec![1.0; panel.rows.len()];
    let mut cum = 1.0;
    for (i, r) in panel.rows.iter().enumerate() {
        if r.k == 0 {
            cum = 1.0;
        } else if spec.models_arm(r.z) {
            spec.write_row(r.j, r.k, r.z, panel.x(r.person), &mut buf);
            cum *= expit(dot(&buf, kappa));
        }
        out[i] = cum;
    }
    out
}

/// Per-trial summary of the weights over the outcome risk set.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrialWeightSummary {
    pub trial: u32,
    pub rows: usize,
    pub mean: f64,
    pub max: f64,
    pub p99: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct WeightDiagnostics {
    pub trials: Vec<TrialWeightSummary>,
    /// `(lower, upper)` caps when truncation was requested.
    pub truncation_bounds: Option<(f64, f64)>,
}

/// Fills `panel.rows[..].weight`. `truncation = Some(p)` caps weights at the
/// `p`-th and `(100 - p)`-th percentiles of the outcome risk set weights.
pub fn compute_ip_weights(
    panel: &mut Panel,
    fits: &NuisanceFits,
    truncation: Option<f64>,
) -> Result<WeightDiagnostics, WeightError> {
    if let Some(p) = truncation {
        if !(p > 0.0 && p < 50.0) {
            return Err(WeightError::Truncation(p));
        }
    }
    let e = propensity_by_row(panel, &fits.spec_g, &fits.zeta.coef);
    let cum_d = match (&fits.spec_h, &fits.kappa) {
        (Some(spec), Some(kappa)) => cumulative_uncensored_by_row(panel, spec, &kappa.coef),
        _ => vec![1.0; panel.rows.len()],
    };
    for (i, row) in panel.rows.iter_mut().enumerate() {
        let bad = if !(e[i] > 0.0 && e[i] < 1.0) {
            Some(("e", e[i]))
        } else if !(cum_d[i] > 0.0) {
            Some(("cumulative d", cum_d[i]))
        } else {
            None
        };
        if let Some((what, value)) = bad {
            return Err(WeightError::Positivity {
                id: panel.ids[row.person as usize].clone(),
                j: row.j,
                k: row.k,
                what,
                value,
            });
        }
        row.weight = ip_weight(row.z, e[i], cum_d[i]);
    }

    let mut diagnostics = WeightDiagnostics::default();
    if let Some(p) = truncation {
        let mut used: Vec<f64> = panel.rows.iter().filter(|r| r.at_risk && r.r).map(|r| r.weight).collect();
        if !used.is_empty() {
            used.sort_unstable_by(f64::total_cmp);
            let lo = quantile_sorted(&used, p / 100.0);
            let hi = quantile_sorted(&used, 1.0 - p / 100.0);
            for row in panel.rows.iter_mut() {
                row.weight = row.weight.clamp(lo, hi);
            }
            diagnostics.truncation_bounds = Some((lo, hi));
        }
    }

    let max_j = panel.rows.iter().map(|r| r.j).max().unwrap_or(0);
    let mut by_trial: Vec<Vec<f64>> = vec![Vec::new(); max_j as usize + 1];
    for r in panel.rows.iter().filter(|r| r.at_risk && r.r) {
        by_trial[r.j as usize].push(r.weight);
    }
    for (j, mut w) in by_trial.into_iter().enumerate() {
        if w.is_empty() {
            continue;
        }
        w.sort_unstable_by(f64::total_cmp);
        diagnostics.trials.push(TrialWeightSummary {
            trial: j as u32,
            rows: w.len(),
            mean: w.iter().sum::<f64>() / w.len() as f64,
            max: w[w.len() - 1],
            p99: quantile_sorted(&w, 0.99),
        });
    }
    Ok(diagnostics)
}
