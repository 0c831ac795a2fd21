//! Marginal structural models for the counterfactual hazards
//! `lambda^z_j(k)`, their weighted pooled fit, and the VE surface.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cohort::Panel;
use crate::glm::{fit_weighted_logistic, FitResult, GlmError};
use crate::linalg::{dot, Matrix};
use crate::math::{exp, expit, expm1, log, log1p};
use crate::terms::TimeBasis;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MsmError {
    #[error("trial {j}, week {k} is outside the study window")]
    Domain { j: u32, k: u32 },
    #[error("outcome model: {0}")]
    Fit(#[from] GlmError),
    #[error("outcome model has no at-risk rows with positive weight")]
    NoRows,
    #[error("cumulative risk under z = 0 is numerically zero at trial {j}, week {k}")]
    ZeroRisk { j: u32, k: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MsmFamily {
    /// `a0 + a1 z + a2 f1(k) z + a3 f2(j+k) + a4 f3(j+k) z`
    CalendarAndTsv,
    /// `a0 + a1j z + a2j f1(k) z + a3 f2(j+k)`
    TrialSpecific,
    /// `a0 + a1 z + a2 f1(k) z + a3 f2(j+k)`
    TsvOnly,
}

/// Outcome MSM: family plus the term builders for week on trial (`f1`),
/// calendar week (`f2`) and the calendar-by-regimen interaction (`f3`).
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub family: MsmFamily,
    pub f1: TimeBasis,
    pub f2: TimeBasis,
    pub f3: TimeBasis,
    pub max_trial: u32,
    pub tau: u32,
}

impl ModelSpec {
    pub fn width(&self) -> usize {
        let (w1, w2, w3) = (self.f1.width(), self.f2.width(), self.f3.width());
        match self.family {
            MsmFamily::CalendarAndTsv => 2 + w1 + w2 + w3,
            MsmFamily::TsvOnly => 2 + w1 + w2,
            MsmFamily::TrialSpecific => 1 + (self.max_trial as usize + 1) * (1 + w1) + w2,
        }
    }

    #[inline]
    pub fn contains(&self, j: u32, k: u32) -> bool {
        j <= self.max_trial && j + k <= self.tau
    }

    /// Writes `f(j, k, z)` into `out` (length [`width`](Self::width)).
    pub fn write_design(&self, j: u32, k: u32, z: bool, out: &mut [f64]) -> Result<(), MsmError> {
        if !self.contains(j, k) {
            return Err(MsmError::Domain { j, k });
        }
        let zf = if z { 1.0 } else { 0.0 };
        let (w1, w2) = (self.f1.width(), self.f2.width());
        let (kf, cal) = (f64::from(k), f64::from(j + k));
        out.fill(0.0);
        out[0] = 1.0;
        match self.family {
            MsmFamily::CalendarAndTsv | MsmFamily::TsvOnly => {
                out[1] = zf;
                self.f1.write(kf, &mut out[2..2 + w1]);
                out[2..2 + w1].iter_mut().for_each(|v| *v *= zf);
                self.f2.write(cal, &mut out[2 + w1..2 + w1 + w2]);
                if self.family == MsmFamily::CalendarAndTsv {
                    let f3 = &mut out[2 + w1 + w2..];
                    self.f3.write(cal, f3);
                    f3.iter_mut().for_each(|v| *v *= zf);
                }
            }
            MsmFamily::TrialSpecific => {
                if z {
                    let at = 1 + j as usize * (1 + w1);
                    out[at] = 1.0;
                    self.f1.write(kf, &mut out[at + 1..at + 1 + w1]);
                }
                let at = 1 + (self.max_trial as usize + 1) * (1 + w1);
                self.f2.write(cal, &mut out[at..at + w2]);
            }
        }
        Ok(())
    }

    pub fn build_design(&self, j: u32, k: u32, z: bool) -> Result<Vec<f64>, MsmError> {
        let mut out = vec![0.0; self.width()];
        self.write_design(j, k, z, &mut out)?;
        Ok(out)
    }

    /// Dense index of the `(j, k, z)` cell.
    #[inline]
    pub fn cell_index(&self, j: u32, k: u32, z: bool) -> usize {
        ((j as usize * (self.tau as usize + 1)) + k as usize) * 2 + usize::from(z)
    }

    pub fn num_cells(&self) -> usize {
        (self.max_trial as usize + 1) * (self.tau as usize + 1) * 2
    }
}

/// Weighted totals `(sum W, sum W y)` of the outcome risk set per `(j, k, z)` cell.
///
/// The MSM design depends on a row only through its cell, so the weighted
/// pooled likelihood is a function of these totals alone.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSums {
    pub weight: Vec<f64>,
    pub weighted_events: Vec<f64>,
}

impl CellSums {
    /// Accumulates over rows with `k >= 1` and `R_j(k) = 1`, using `weight(i)` for row `i`.
    pub fn accumulate(panel: &Panel, spec: &ModelSpec, weight: impl Fn(usize) -> f64) -> Result<Self, MsmError> {
        let mut sums = CellSums { weight: vec![0.0; spec.num_cells()], weighted_events: vec![0.0; spec.num_cells()] };
        for (i, r) in panel.rows.iter().enumerate() {
            if !(r.at_risk && r.r) {
                continue;
            }
            if !spec.contains(r.j, r.k) {
                return Err(MsmError::Domain { j: r.j, k: r.k });
            }
            let c = spec.cell_index(r.j, r.k, r.z);
            let w = weight(i);
            sums.weight[c] += w;
            if r.y {
                sums.weighted_events[c] += w;
            }
        }
        Ok(sums)
    }

    /// Cells with positive weight, as `(j, k, z)`.
    pub fn occupied(&self, spec: &ModelSpec) -> Vec<(u32, u32, bool)> {
        let mut out = Vec::new();
        for j in 0..=spec.max_trial {
            for k in 1..=spec.tau - j {
                for z in [false, true] {
                    if self.weight[spec.cell_index(j, k, z)] > 0.0 {
                        out.push((j, k, z));
                    }
                }
            }
        }
        out
    }
}

/// Fits the outcome MSM from precomputed cell totals.
pub fn fit_msm_cells(sums: &CellSums, spec: &ModelSpec) -> Result<FitResult, MsmError> {
    let cells = sums.occupied(spec);
    if cells.is_empty() {
        return Err(MsmError::NoRows);
    }
    let mut design = Matrix::zeros(cells.len(), spec.width());
    let mut y = Vec::with_capacity(cells.len());
    let mut w = Vec::with_capacity(cells.len());
    for (n, &(j, k, z)) in cells.iter().enumerate() {
        spec.write_design(j, k, z, design.row_mut(n))?;
        let c = spec.cell_index(j, k, z);
        w.push(sums.weight[c]);
        y.push((sums.weighted_events[c] / sums.weight[c]).clamp(0.0, 1.0));
    }
    Ok(fit_weighted_logistic(&design, &y, &w)?)
}

/// Weighted pooled logistic fit of `Y_j(k)` on `f(j, k, Z_j)` over the
/// outcome risk set, using the panel's weight column.
pub fn fit_msm(panel: &Panel, spec: &ModelSpec) -> Result<FitResult, MsmError> {
    let sums = CellSums::accumulate(panel, spec, |i| panel.rows[i].weight)?;
    fit_msm_cells(&sums, spec)
}

/// `expit(alpha . f(j, k, z))`.
pub fn hazard(alpha: &[f64], j: u32, k: u32, z: bool, spec: &ModelSpec) -> Result<f64, MsmError> {
    Ok(expit(dot(alpha, &spec.build_design(j, k, z)?)))
}

/// `log(1 - prod(1 - h1)) - log(1 - prod(1 - h0))` over weeks `1..=k`,
/// with `hazard(m, z)` supplying the weekly hazards. `None` if the `z = 0`
/// risk is not positive.
pub fn log_rr_with(k: u32, mut hazard: impl FnMut(u32, bool) -> f64) -> Option<f64> {
    let (mut s0, mut s1) = (0.0, 0.0);
    for m in 1..=k {
        s0 += log1p(-hazard(m, false));
        s1 += log1p(-hazard(m, true));
    }
    let (r0, r1) = (-expm1(s0), -expm1(s1));
    (r0 > 0.0 && r0.is_finite()).then(|| log(r1) - log(r0))
}

/// Plug-in log risk ratio `rho_j(k)`.
pub fn log_rr(alpha: &[f64], j: u32, k: u32, spec: &ModelSpec) -> Result<f64, MsmError> {
    if k == 0 || !spec.contains(j, k) {
        return Err(MsmError::Domain { j, k });
    }
    let mut buf = vec![0.0; spec.width()];
    let mut err = None;
    let rho = log_rr_with(k, |m, z| match spec.write_design(j, m, z, &mut buf) {
        Ok(()) => expit(dot(alpha, &buf)),
        Err(e) => {
            err = Some(e);
            0.0
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    rho.ok_or(MsmError::ZeroRisk { j, k })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridCell {
    pub j: u32,
    pub k: u32,
}

/// Every `(j, k)` with `k >= 1` in the study window, ordered by `j` then `k`.
pub fn default_grid(spec: &ModelSpec) -> Vec<GridCell> {
    (0..=spec.max_trial)
        .flat_map(|j| (1..=spec.tau - j).map(move |k| GridCell { j, k }))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VeCell {
    pub j: u32,
    pub k: u32,
    pub ve: f64,
    pub log_rr: f64,
    pub se_log_rr: Option<f64>,
    /// `(lower, upper)` on the VE scale.
    pub ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VESurface {
    pub cells: Vec<VeCell>,
    /// Significance level of the intervals, once filled in.
    pub gamma: Option<f64>,
}

impl VESurface {
    pub fn get(&self, j: u32, k: u32) -> Option<&VeCell> {
        self.cells.iter().find(|c| c.j == j && c.k == k)
    }
}

/// Point estimates `VE_j(k) = 1 - exp(rho_j(k))` over `grid`.
pub fn ve_surface(alpha: &[f64], grid: &[GridCell], spec: &ModelSpec) -> Result<VESurface, MsmError> {
    let cells = grid
        .iter()
        .map(|g| {
            let rho = log_rr(alpha, g.j, g.k, spec)?;
            Ok(VeCell { j: g.j, k: g.k, ve: -expm1(rho), log_rr: rho, se_log_rr: None, ci: None })
        })
        .collect::<Result<Vec<_>, MsmError>>()?;
    Ok(VESurface { cells, gamma: None })
}

/// `1 - exp(rho)`.
#[inline]
pub fn ve_from_log_rr(rho: f64) -> f64 {
    1.0 - exp(rho)
}
