//! Run configuration: a TOML file with one section per model, merged with
//! command-line overrides and resolved into fully explicit settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use vetrial_core::cohort::ProtocolConfig;
use vetrial_core::msm::{GridCell, MsmFamily};
use vetrial_core::pipeline::{
    AnalysisConfig, CensoringTemplate, OutcomeTemplate, PropensityTemplate, TermTemplate,
};
use vetrial_core::sim::AnalysisPlan;
use vetrial_core::splines::DEFAULT_PERCENTILES;
use vetrial_core::weights::CensoredArms;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("missing section [{0}]")]
    MissingSection(&'static str),
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<String>,
    pub protocol: Option<ProtocolSection>,
    pub propensity: Option<PropensitySection>,
    pub censoring: Option<CensoringSection>,
    pub outcome: Option<OutcomeSection>,
    pub simulation: Option<SimulationSection>,
    pub oracle: Option<OracleSection>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub trials: u32,
    pub tau: u32,
    #[serde(default = "default_dose2_window")]
    pub dose2_window: u32,
    pub week0_date: Option<String>,
}

fn default_dose2_window() -> u32 {
    6
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropensitySection {
    pub trial: String,
    #[serde(default)]
    pub covariates: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CensoringSection {
    /// `pooled` fits the censoring model; `none` fixes censoring weights at 1.
    pub model: String,
    #[serde(default = "default_arms")]
    pub arms: String,
    #[serde(default = "none_term")]
    pub trial: String,
    #[serde(default = "none_term")]
    pub week: String,
    #[serde(default = "none_term")]
    pub calendar: String,
    #[serde(default)]
    pub regimen: bool,
    #[serde(default)]
    pub covariates: Vec<String>,
}

fn default_arms() -> String {
    "both".into()
}

fn none_term() -> String {
    "none".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSection {
    pub model: String,
    pub f1: String,
    pub f2: String,
    #[serde(default = "none_term")]
    pub f3: String,
    #[serde(default = "all_grid")]
    pub grid: String,
    #[serde(default = "default_teh")]
    pub teh: String,
    pub teh_k_max: Option<u32>,
    pub truncate_weights: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn all_grid() -> String {
    "all".into()
}

fn default_teh() -> String {
    "one-sided".into()
}

fn default_gamma() -> f64 {
    0.05
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub scenario: u8,
    pub n: Option<usize>,
    pub reps: Option<u64>,
    pub tau: Option<u32>,
    pub trials: Option<u32>,
    #[serde(default = "default_families")]
    pub model_family: Vec<String>,
    #[serde(default)]
    pub spline: bool,
    #[serde(default = "default_true")]
    pub teh: bool,
    pub calibration_n: Option<usize>,
    pub truncate_weights: Option<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
}

fn default_families() -> Vec<String> {
    vec!["eq3".into()]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_oracle_trials")]
    pub trials: u32,
    #[serde(default = "default_oracle_tau")]
    pub tau: u32,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            instances: default_instances(),
            levels: default_levels(),
            trials: default_oracle_trials(),
            tau: default_oracle_tau(),
            tolerance: default_tolerance(),
        }
    }
}

fn default_instances() -> usize {
    50
}
fn default_levels() -> usize {
    2
}
fn default_oracle_trials() -> u32 {
    3
}
fn default_oracle_tau() -> u32 {
    4
}
fn default_tolerance() -> f64 {
    1e-10
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse { path: path.display().to_string(), source },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse { path: "<inline>".into(), source })
    }
}

/// Whether a term should have its polynomials swapped for the default spline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplineToggle {
    AsConfigured,
    On,
    Off,
}

/// Parses a time-term choice: `none`, `linear`, `poly<d>`, `indicator<levels>`,
/// `spline`, `spline(p1,p2,...)` (percentiles) or `knots(t1,t2,...)`.
pub fn parse_term(key: &str, text: &str) -> Result<TermTemplate, ConfigError> {
    let t = text.trim().to_ascii_lowercase();
    let list = |inner: &str| -> Result<Vec<f64>, ConfigError> {
        inner
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| invalid(key, format!("bad number {v:?} in {text:?}"))))
            .collect()
    };
    let inside = |prefix: &str| t.strip_prefix(prefix).and_then(|r| r.strip_prefix('(')).and_then(|r| r.strip_suffix(')'));
    Ok(match t.as_str() {
        "none" | "" => TermTemplate::Empty,
        "linear" => TermTemplate::Polynomial(1),
        "spline" => TermTemplate::default_spline(),
        _ => {
            if let Some(inner) = inside("spline") {
                TermTemplate::SplinePercentiles(list(inner)?)
            } else if let Some(inner) = inside("knots") {
                TermTemplate::SplineKnots(list(inner)?)
            } else if let Some(d) = t.strip_prefix("poly") {
                let d: u32 = d.parse().map_err(|_| invalid(key, format!("bad polynomial degree in {text:?}")))?;
                if d == 0 {
                    return Err(invalid(key, "polynomial degree must be at least 1"));
                }
                TermTemplate::Polynomial(d)
            } else if let Some(l) = t.strip_prefix("indicator") {
                TermTemplate::Indicator(l.parse().map_err(|_| invalid(key, format!("bad level count in {text:?}")))?)
            } else {
                return Err(invalid(key, format!("unknown term {text:?}")));
            }
        }
    })
}

/// Canonical text of a term, the inverse of [`parse_term`].
pub fn term_text(t: &TermTemplate) -> String {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    match t {
        TermTemplate::Empty => "none".into(),
        TermTemplate::Polynomial(d) => format!("poly{d}"),
        TermTemplate::Indicator(l) => format!("indicator{l}"),
        TermTemplate::SplinePercentiles(p) if p.as_slice() == DEFAULT_PERCENTILES.as_slice() => "spline".into(),
        TermTemplate::SplinePercentiles(p) => format!("spline({})", join(p)),
        TermTemplate::SplineKnots(k) => format!("knots({})", join(k)),
    }
}

fn apply_toggle(t: TermTemplate, toggle: SplineToggle) -> TermTemplate {
    match (toggle, &t) {
        (SplineToggle::On, TermTemplate::Polynomial(_)) => TermTemplate::default_spline(),
        (SplineToggle::Off, TermTemplate::SplinePercentiles(_) | TermTemplate::SplineKnots(_)) => {
            TermTemplate::Polynomial(2)
        }
        _ => t,
    }
}

pub fn parse_family(key: &str, text: &str) -> Result<MsmFamily, ConfigError> {
    match text.trim().to_ascii_lowercase().as_str() {
        "eq3" => Ok(MsmFamily::CalendarAndTsv),
        "eq4" => Ok(MsmFamily::TrialSpecific),
        "eq5" => Ok(MsmFamily::TsvOnly),
        other => Err(invalid(key, format!("unknown model {other:?}; expected eq3, eq4 or eq5"))),
    }
}

pub fn family_text(f: MsmFamily) -> &'static str {
    match f {
        MsmFamily::CalendarAndTsv => "eq3",
        MsmFamily::TrialSpecific => "eq4",
        MsmFamily::TsvOnly => "eq5",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TehAlternative {
    OneSided,
    TwoSided,
}

pub fn parse_teh(key: &str, text: &str) -> Result<Option<TehAlternative>, ConfigError> {
    match text.trim().to_ascii_lowercase().as_str() {
        "one-sided" => Ok(Some(TehAlternative::OneSided)),
        "two-sided" => Ok(Some(TehAlternative::TwoSided)),
        "off" | "none" => Ok(None),
        other => Err(invalid(key, format!("unknown test {other:?}; expected one-sided, two-sided or off"))),
    }
}

/// Parses `all` or `j=<list>;k=<list>` where a list mixes values and
/// inclusive ranges `a..b`. Cells outside the study window are dropped.
pub fn parse_grid(text: &str, protocol: &ProtocolConfig) -> Result<Option<Vec<GridCell>>, ConfigError> {
    let text = text.trim();
    if text.eq_ignore_ascii_case("all") {
        return Ok(None);
    }
    let values = |part: &str| -> Result<Vec<u32>, ConfigError> {
        let mut out = Vec::new();
        for item in part.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let num = |s: &str| s.trim().parse::<u32>().map_err(|_| invalid("grid", format!("bad value {s:?}")));
            match item.split_once("..") {
                Some((a, b)) => {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(invalid("grid", format!("empty range {item:?}")));
                    }
                    out.extend(a..=b);
                }
                None => out.push(num(item)?),
            }
        }
        Ok(out)
    };
    let (mut js, mut ks) = (None, None);
    for part in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('=') {
            Some(("j", v)) => js = Some(values(v)?),
            Some(("k", v)) => ks = Some(values(v)?),
            _ => return Err(invalid("grid", format!("expected j=... or k=..., found {part:?}"))),
        }
    }
    let js = js.unwrap_or_else(|| (0..=protocol.max_trial()).collect());
    let ks = ks.unwrap_or_else(|| (1..=protocol.tau).collect());
    let mut cells: Vec<GridCell> = js
        .iter()
        .filter(|&&j| j <= protocol.max_trial())
        .flat_map(|&j| ks.iter().filter(move |&&k| k >= 1 && k <= protocol.tau - j).map(move |&k| GridCell { j, k }))
        .collect();
    cells.sort();
    cells.dedup();
    if cells.is_empty() {
        return Err(invalid("grid", format!("{text:?} selects no cell of the study window")));
    }
    Ok(Some(cells))
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub grid: Option<String>,
    pub model: Option<String>,
    pub spline: Option<bool>,
    pub truncate_weights: Option<f64>,
    pub teh: Option<String>,
}

impl Overrides {
    fn toggle(&self) -> SplineToggle {
        match self.spline {
            Some(true) => SplineToggle::On,
            Some(false) => SplineToggle::Off,
            None => SplineToggle::AsConfigured,
        }
    }
}

/// Fully resolved analysis settings, echoed into the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedAnalysis {
    pub protocol: ProtocolConfig,
    pub propensity_trial: String,
    pub propensity_covariates: Vec<String>,
    pub censoring_model: String,
    pub censoring_arms: String,
    pub censoring_trial: String,
    pub censoring_week: String,
    pub censoring_calendar: String,
    pub censoring_regimen: bool,
    pub censoring_covariates: Vec<String>,
    pub model: String,
    pub f1: String,
    pub f2: String,
    pub f3: String,
    pub grid: String,
    pub teh: Option<TehAlternative>,
    pub teh_k_max: u32,
    pub truncate_weights: Option<f64>,
    pub gamma: f64,
    #[serde(skip)]
    pub analysis: Option<AnalysisConfig>,
}

pub fn resolve_protocol(file: &FileConfig) -> Result<ProtocolConfig, ConfigError> {
    let p = file.protocol.as_ref().ok_or(ConfigError::MissingSection("protocol"))?;
    let protocol = ProtocolConfig {
        num_trials: p.trials,
        tau: p.tau,
        dose2_window: p.dose2_window,
        week0_date: p.week0_date.clone(),
    };
    protocol.validate().map_err(|e| invalid("protocol", e.to_string()))?;
    Ok(protocol)
}

/// With `available = None` only the section structure is checked and the
/// indices come back empty.
fn covariate_indices(key: &str, names: &[String], available: Option<&[String]>) -> Result<Vec<usize>, ConfigError> {
    let Some(available) = available else {
        return Ok(Vec::new());
    };
    names
        .iter()
        .map(|n| {
            available
                .iter()
                .position(|a| a == n)
                .ok_or_else(|| invalid(key, format!("unknown covariate {n:?}; cohort has {available:?}")))
        })
        .collect()
}

/// Resolves the analysis sections against the cohort's covariate names.
/// Every model section must be present, so a missing weight model is a
/// configuration error before any fitting. Pass `None` for the names to
/// validate a config before the cohort is read.
pub fn resolve_analysis(
    file: &FileConfig,
    over: &Overrides,
    covariate_names: Option<&[String]>,
) -> Result<ResolvedAnalysis, ConfigError> {
    let protocol = resolve_protocol(file)?;
    let toggle = over.toggle();
    let ps = file.propensity.as_ref().ok_or(ConfigError::MissingSection("propensity"))?;
    let cs = file.censoring.as_ref().ok_or(ConfigError::MissingSection("censoring"))?;
    let os = file.outcome.as_ref().ok_or(ConfigError::MissingSection("outcome"))?;

    let prop_trial = apply_toggle(parse_term("propensity.trial", &ps.trial)?, toggle);
    let propensity = PropensityTemplate {
        trial: prop_trial.clone(),
        covariates: covariate_indices("propensity.covariates", &ps.covariates, covariate_names)?,
    };

    let censoring_on = match cs.model.trim().to_ascii_lowercase().as_str() {
        "pooled" => true,
        "none" => false,
        other => return Err(invalid("censoring.model", format!("expected pooled or none, found {other:?}"))),
    };
    let arms = match cs.arms.trim().to_ascii_lowercase().as_str() {
        "both" => CensoredArms::Both,
        "comparator" => CensoredArms::ComparatorOnly,
        other => return Err(invalid("censoring.arms", format!("expected both or comparator, found {other:?}"))),
    };
    let c_trial = apply_toggle(parse_term("censoring.trial", &cs.trial)?, toggle);
    let c_week = apply_toggle(parse_term("censoring.week", &cs.week)?, toggle);
    let c_cal = apply_toggle(parse_term("censoring.calendar", &cs.calendar)?, toggle);
    let censoring = censoring_on
        .then(|| -> Result<CensoringTemplate, ConfigError> {
            Ok(CensoringTemplate {
                trial: c_trial.clone(),
                trial_time: c_week.clone(),
                calendar: c_cal.clone(),
                regimen_term: cs.regimen,
                covariates: covariate_indices("censoring.covariates", &cs.covariates, covariate_names)?,
                arms,
            })
        })
        .transpose()?;

    let model_text = over.model.clone().unwrap_or_else(|| os.model.clone());
    let family = parse_family("outcome.model", &model_text)?;
    let f1 = apply_toggle(parse_term("outcome.f1", &os.f1)?, toggle);
    let f2 = apply_toggle(parse_term("outcome.f2", &os.f2)?, toggle);
    let f3 = if family == MsmFamily::CalendarAndTsv {
        apply_toggle(parse_term("outcome.f3", &os.f3)?, toggle)
    } else {
        TermTemplate::Empty
    };
    let grid_text = over.grid.clone().unwrap_or_else(|| os.grid.clone());
    let grid = parse_grid(&grid_text, &protocol)?;
    let teh = parse_teh("outcome.teh", over.teh.as_deref().unwrap_or(&os.teh))?;
    let available = protocol.tau - protocol.max_trial();
    let teh_k_max = os.teh_k_max.unwrap_or(available);
    if teh.is_some() && (teh_k_max == 0 || teh_k_max > available) {
        return Err(invalid("outcome.teh_k_max", format!("must lie in 1..={available}")));
    }
    let truncation = over.truncate_weights.or(os.truncate_weights);
    if let Some(p) = truncation {
        if !(p > 0.0 && p < 50.0) {
            return Err(invalid("truncate_weights", format!("percentile {p} must lie in (0, 50)")));
        }
    }
    if !(os.gamma > 0.0 && os.gamma < 1.0) {
        return Err(invalid("outcome.gamma", "must lie in (0, 1)"));
    }
    let analysis = AnalysisConfig {
        propensity,
        censoring,
        outcomes: vec![OutcomeTemplate {
            family,
            f1: f1.clone(),
            f2: f2.clone(),
            f3: f3.clone(),
            grid,
            teh: teh.is_some(),
            teh_k_max: Some(teh_k_max),
        }],
        truncation,
        gamma: os.gamma,
    };
    Ok(ResolvedAnalysis {
        protocol,
        propensity_trial: term_text(&prop_trial),
        propensity_covariates: ps.covariates.clone(),
        censoring_model: if censoring_on { "pooled" } else { "none" }.into(),
        censoring_arms: match arms {
            CensoredArms::Both => "both",
            CensoredArms::ComparatorOnly => "comparator",
        }
        .into(),
        censoring_trial: term_text(&c_trial),
        censoring_week: term_text(&c_week),
        censoring_calendar: term_text(&c_cal),
        censoring_regimen: cs.regimen,
        censoring_covariates: cs.covariates.clone(),
        model: family_text(family).into(),
        f1: term_text(&f1),
        f2: term_text(&f2),
        f3: term_text(&f3),
        grid: grid_text,
        teh,
        teh_k_max,
        truncate_weights: truncation,
        gamma: os.gamma,
        analysis: Some(analysis),
    })
}

/// Resolved settings of a simulation study, echoed into the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedSimulation {
    pub scenario: u8,
    pub n: usize,
    pub reps: u64,
    pub tau: u32,
    pub trials: u32,
    pub seed: u64,
    pub model_family: Vec<String>,
    pub spline: bool,
    pub teh: bool,
    pub calibration_n: usize,
    pub truncate_weights: Option<f64>,
    pub gamma: f64,
}

impl ResolvedSimulation {
    pub fn plans(&self) -> Result<Vec<AnalysisPlan>, ConfigError> {
        self.model_family
            .iter()
            .map(|m| {
                Ok(AnalysisPlan { family: parse_family("simulation.model_family", m)?, spline: self.spline, teh: self.teh })
            })
            .collect()
    }
}

pub fn resolve_simulation(file: &FileConfig, over: &Overrides, seed: u64) -> Result<ResolvedSimulation, ConfigError> {
    let s = file.simulation.as_ref().ok_or(ConfigError::MissingSection("simulation"))?;
    if !(1..=3).contains(&s.scenario) {
        return Err(invalid("simulation.scenario", "expected 1, 2 or 3"));
    }
    let model_family = match &over.model {
        Some(m) => vec![m.clone()],
        None => s.model_family.clone(),
    };
    if model_family.is_empty() {
        return Err(invalid("simulation.model_family", "at least one model is required"));
    }
    let teh = match &over.teh {
        Some(t) => parse_teh("teh", t)?.is_some(),
        None => s.teh,
    };
    let truncate_weights = over.truncate_weights.or(s.truncate_weights);
    if let Some(p) = truncate_weights {
        if !(p > 0.0 && p < 50.0) {
            return Err(invalid("truncate_weights", format!("percentile {p} must lie in (0, 50)")));
        }
    }
    let resolved = ResolvedSimulation {
        scenario: s.scenario,
        n: s.n.unwrap_or(50_000),
        reps: s.reps.unwrap_or(100),
        tau: s.tau.unwrap_or(20),
        trials: s.trials.unwrap_or(13),
        seed,
        model_family,
        spline: over.spline.unwrap_or(s.spline),
        teh,
        calibration_n: s.calibration_n.unwrap_or(100_000),
        truncate_weights,
        gamma: s.gamma,
    };
    resolved.plans()?;
    if resolved.n == 0 || resolved.calibration_n == 0 {
        return Err(invalid("simulation.n", "sample sizes must be positive"));
    }
    if resolved.trials == 0 || resolved.trials > resolved.tau {
        return Err(invalid("simulation.trials", "need 1 <= trials <= tau"));
    }
    Ok(resolved)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn protocol() -> ProtocolConfig {
        ProtocolConfig::new(13, 20).unwrap()
    }

    #[test]
    fn terms_round_trip() {
        for text in ["none", "poly2", "indicator13", "spline", "spline(10,50,90)", "knots(1,5,9)"] {
            assert_eq!(term_text(&parse_term("t", text).unwrap()), text);
        }
        assert!(parse_term("t", "cubic").is_err());
        assert!(parse_term("t", "poly0").is_err());
    }

    #[test]
    fn grid_selection() {
        let cells = parse_grid("j=0,3,6,9;k=1..34", &protocol()).unwrap().unwrap();
        // k is capped by the follow-up of each trial.
        assert_eq!(cells.len(), 20 + 17 + 14 + 11);
        assert_eq!(cells[0], GridCell { j: 0, k: 1 });
        assert!(parse_grid("all", &protocol()).unwrap().is_none());
        assert!(parse_grid("j=30", &protocol()).is_err());
        assert!(parse_grid("x=1", &protocol()).is_err());
    }

    #[test]
    fn missing_weight_model_is_a_config_error() {
        let file = FileConfig::parse(
            r#"
            [protocol]
            trials = 3
            tau = 6
            [propensity]
            trial = "poly1"
            [outcome]
            model = "eq3"
            f1 = "poly1"
            f2 = "poly1"
            "#,
        )
        .unwrap();
        let err = resolve_analysis(&file, &Overrides::default(), None).unwrap_err();
        assert!(matches!(err, ConfigError::MissingSection("censoring")));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(FileConfig::parse("[protocol]\ntrials = 3\ntau = 6\nbogus = 1\n").is_err());
    }
}
