//! End-to-end analysis: expand, fit nuisances, weight, fit outcome models,
//! stack the estimating equations, and report VE surfaces and the
//! homogeneity test.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cohort::{expand_trials, CohortError, Panel, ParticipantRecord, ProtocolConfig};
use crate::glm::FitResult;
use crate::mestimation::{
    sandwich_variance, teh_test, ve_ci, NteStack, OutcomeModel, SandwichOutput, TehResult, ThetaHat, ThetaLayout,
    VarianceError,
};
use crate::msm::{default_grid, fit_msm, ve_surface, GridCell, ModelSpec, MsmError, MsmFamily, VESurface};
use crate::splines::{place_knots, SplineError, DEFAULT_PERCENTILES};
use crate::terms::TimeBasis;
use crate::weights::{
    censoring_rows, compute_ip_weights, fit_censoring, fit_propensity, CensoredArms, CensoringSpec, NuisanceFits,
    PropensitySpec, WeightDiagnostics, WeightError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("stage `expand`: {0}")]
    Expand(#[from] CohortError),
    #[error("stage `knots` ({term}): {source}")]
    Knots {
        term: &'static str,
        #[source]
        source: SplineError,
    },
    #[error("stage `nuisance`: {0}")]
    Nuisance(#[from] WeightError),
    #[error("stage `outcome`: {0}")]
    Outcome(#[from] MsmError),
    #[error("stage `variance`: {0}")]
    Variance(#[from] VarianceError),
    #[error("configuration: {0}")]
    Config(String),
}

/// A time-term choice before knots are resolved against the data.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum TermTemplate {
    Empty,
    Polynomial(u32),
    Indicator(u32),
    /// Restricted cubic spline with knots at these percentiles of the
    /// variable over the rows of the model being fit.
    SplinePercentiles(Vec<f64>),
    /// Restricted cubic spline with fixed knots.
    SplineKnots(Vec<f64>),
}

impl TermTemplate {
    pub fn default_spline() -> Self {
        TermTemplate::SplinePercentiles(DEFAULT_PERCENTILES.to_vec())
    }

    /// Resolves to a basis; `values` is only evaluated for percentile splines.
    pub fn resolve(&self, term: &'static str, values: impl FnOnce() -> Vec<f64>) -> Result<TimeBasis, PipelineError> {
        let knots = |r: Result<_, SplineError>| r.map_err(|source| PipelineError::Knots { term, source });
        Ok(match self {
            TermTemplate::Empty => TimeBasis::Empty,
            TermTemplate::Polynomial(d) => TimeBasis::Polynomial(*d),
            TermTemplate::Indicator(l) => TimeBasis::Indicator(*l),
            TermTemplate::SplinePercentiles(p) => TimeBasis::Spline(knots(place_knots(&values(), p))?),
            TermTemplate::SplineKnots(k) => TimeBasis::Spline(knots(crate::splines::SplineSpec::new(k.clone()))?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PropensityTemplate {
    pub trial: TermTemplate,
    pub covariates: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CensoringTemplate {
    pub trial: TermTemplate,
    pub trial_time: TermTemplate,
    pub calendar: TermTemplate,
    pub regimen_term: bool,
    pub covariates: Vec<usize>,
    pub arms: CensoredArms,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OutcomeTemplate {
    pub family: MsmFamily,
    pub f1: TermTemplate,
    pub f2: TermTemplate,
    pub f3: TermTemplate,
    /// Cells reported with intervals; every `(j, k)` with `k >= 1` when `None`.
    pub grid: Option<Vec<GridCell>>,
    /// Run the homogeneity test, summing VE over weeks `1..=k_max`
    /// (`tau - J` when `None`).
    pub teh: bool,
    pub teh_k_max: Option<u32>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnalysisConfig {
    pub propensity: PropensityTemplate,
    /// `None` fixes censoring weights at 1.
    pub censoring: Option<CensoringTemplate>,
    pub outcomes: Vec<OutcomeTemplate>,
    /// Symmetric weight truncation percentile.
    pub truncation: Option<f64>,
    /// Significance level of the VE intervals.
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeResult {
    pub spec: ModelSpec,
    pub fit: FitResult,
    pub theta: ThetaHat,
    pub surface: VESurface,
    pub teh: Option<TehResult>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisResult {
    pub nuisance: NuisanceFits,
    pub weights: WeightDiagnostics,
    pub outcomes: Vec<OutcomeResult>,
    pub layout: ThetaLayout,
    pub theta: Vec<f64>,
    pub sandwich: SandwichOutput,
    pub persons: usize,
    pub panel_rows: usize,
}

pub fn resolve_propensity(panel: &Panel, t: &PropensityTemplate) -> Result<PropensitySpec, PipelineError> {
    let trial_basis = t.trial.resolve("propensity trial", || {
        panel.rows.iter().filter(|r| r.k == 0).map(|r| f64::from(r.j)).collect()
    })?;
    Ok(PropensitySpec { trial_basis, covariates: t.covariates.clone() })
}

pub fn resolve_censoring(panel: &Panel, t: &CensoringTemplate) -> Result<CensoringSpec, PipelineError> {
    let probe = CensoringSpec {
        trial_basis: TimeBasis::Empty,
        trial_time_basis: TimeBasis::Empty,
        calendar_basis: TimeBasis::Empty,
        regimen_term: t.regimen_term,
        covariates: t.covariates.clone(),
        arms: t.arms,
    };
    let rows = censoring_rows(panel, &probe);
    let values = |f: fn(u32, u32) -> u32| -> Vec<f64> {
        rows.iter().map(|&i| f64::from(f(panel.rows[i].j, panel.rows[i].k))).collect()
    };
    Ok(CensoringSpec {
        trial_basis: t.trial.resolve("censoring trial", || values(|j, _| j))?,
        trial_time_basis: t.trial_time.resolve("censoring week", || values(|_, k| k))?,
        calendar_basis: t.calendar.resolve("censoring calendar", || values(|j, k| j + k))?,
        ..probe
    })
}

pub fn resolve_outcome(panel: &Panel, protocol: &ProtocolConfig, t: &OutcomeTemplate) -> Result<ModelSpec, PipelineError> {
    let values = |f: fn(u32, u32) -> u32| -> Vec<f64> {
        panel.rows.iter().filter(|r| r.at_risk && r.r).map(|r| f64::from(f(r.j, r.k))).collect()
    };
    Ok(ModelSpec {
        family: t.family,
        f1: t.f1.resolve("outcome week", || values(|_, k| k))?,
        f2: t.f2.resolve("outcome calendar", || values(|j, k| j + k))?,
        f3: if t.family == MsmFamily::CalendarAndTsv {
            t.f3.resolve("outcome calendar interaction", || values(|j, k| j + k))?
        } else {
            TimeBasis::Empty
        },
        max_trial: protocol.max_trial(),
        tau: protocol.tau,
    })
}

/// Expands the cohort and runs [`analyze_panel`].
pub fn analyze(
    cohort: &[ParticipantRecord],
    protocol: &ProtocolConfig,
    config: &AnalysisConfig,
) -> Result<AnalysisResult, PipelineError> {
    let mut panel = expand_trials(cohort, protocol)?;
    analyze_panel(&mut panel, config)
}

/// Fits every stage on an expanded panel. The panel's weight column is
/// overwritten.
pub fn analyze_panel(panel: &mut Panel, config: &AnalysisConfig) -> Result<AnalysisResult, PipelineError> {
    if config.outcomes.is_empty() {
        return Err(PipelineError::Config("at least one outcome model is required".into()));
    }
    if !(config.gamma > 0.0 && config.gamma < 1.0) {
        return Err(PipelineError::Config(alloc::format!("gamma = {} must lie in (0, 1)", config.gamma)));
    }
    let protocol = panel
        .protocol
        .clone()
        .ok_or_else(|| PipelineError::Config("panel carries no protocol".into()))?;

    let spec_g = resolve_propensity(panel, &config.propensity)?;
    let spec_h = config.censoring.as_ref().map(|t| resolve_censoring(panel, t)).transpose()?;
    let zeta = fit_propensity(panel, &spec_g)?;
    let kappa = spec_h.as_ref().map(|s| fit_censoring(panel, s)).transpose()?;
    let nuisance = NuisanceFits { zeta, kappa, spec_g, spec_h };
    let weights = compute_ip_weights(panel, &nuisance, config.truncation)?;

    let mut models = Vec::new();
    let mut fits = Vec::new();
    for t in &config.outcomes {
        let spec = resolve_outcome(panel, &protocol, t)?;
        let fit = fit_msm(panel, &spec)?;
        let grid = t.grid.clone().unwrap_or_else(|| default_grid(&spec));
        let teh_k_max = t.teh.then(|| t.teh_k_max.unwrap_or(protocol.tau - protocol.max_trial()));
        models.push(OutcomeModel { spec, grid, teh_k_max });
        fits.push(fit);
    }

    let stack = NteStack::new(
        panel,
        &nuisance.spec_g,
        nuisance.spec_h.as_ref(),
        &models,
        weights.truncation_bounds,
    )?;
    let kappa_coef: &[f64] = nuisance.kappa.as_ref().map_or(&[], |k| &k.coef);
    let alphas: Vec<&[f64]> = fits.iter().map(|f| f.coef.as_slice()).collect();
    let theta = stack.assemble(&nuisance.zeta.coef, kappa_coef, &alphas)?;
    let sandwich = sandwich_variance(&stack, &theta)?;
    let layout = stack.layout().clone();
    let hats = stack.theta_hats(&theta);
    drop(stack);

    let mut outcomes = Vec::new();
    for ((model, fit), th) in models.into_iter().zip(fits).zip(hats) {
        let point = ve_surface(&fit.coef, &model.grid, &model.spec)?;
        let surface = ve_ci(&point, &sandwich, &th, config.gamma)?;
        let teh = th.k_max.map(|_| teh_test(&th, &model.spec, &sandwich)).transpose()?;
        outcomes.push(OutcomeResult { spec: model.spec, fit, theta: th, surface, teh });
    }
    Ok(AnalysisResult {
        nuisance,
        weights,
        outcomes,
        layout,
        theta,
        sandwich,
        persons: panel.num_persons(),
        panel_rows: panel.rows.len(),
    })
}
