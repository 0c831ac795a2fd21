//! The JSON record written next to every run's outputs.
//!
//! The creation time is the first field and the only one that varies between
//! two runs of the same configuration and seed.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use vetrial_core::glm::FitResult;
use vetrial_core::mestimation::{SandwichDiagnostics, TehResult, ThetaHat, ThetaLayout};
use vetrial_core::msm::ModelSpec;
use vetrial_core::sim::BalancingIntercepts;
use vetrial_core::weights::{CensoringSpec, PropensitySpec, WeightDiagnostics};

use crate::config::{OracleSection, ResolvedAnalysis, ResolvedSimulation, TehAlternative};

#[derive(Debug, Serialize)]
pub struct Manifest<T: Serialize> {
    pub created_unix_seconds: u64,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Manifest<T> {
    pub fn new(command: &'static str, seed: Option<u64>, body: T) -> Self {
        let created_unix_seconds = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Manifest { created_unix_seconds, version: env!("CARGO_PKG_VERSION"), command, seed, body }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct NuisanceRecord {
    pub spec: PropensitySpec,
    pub fit: FitResult,
}

#[derive(Debug, Serialize)]
pub struct CensoringRecord {
    pub spec: CensoringSpec,
    pub fit: FitResult,
}

#[derive(Debug, Serialize)]
pub struct OutcomeRecord {
    pub spec: ModelSpec,
    pub fit: FitResult,
    /// Estimates with their positions in the stacked parameter vector.
    pub theta: ThetaHat,
}

#[derive(Debug, Serialize)]
pub struct SandwichRecord {
    pub n: usize,
    pub dim: usize,
    pub diagnostics: SandwichDiagnostics,
}

#[derive(Debug, Serialize)]
pub struct TehRecord {
    pub alternative: TehAlternative,
    pub reject: bool,
    pub result: TehResult,
    pub path: String,
}

#[derive(Debug, Serialize)]
pub struct AnalyzeBody {
    pub cohort: String,
    pub covariates: Vec<String>,
    pub persons: usize,
    pub panel_rows: usize,
    pub config: ResolvedAnalysis,
    pub propensity: NuisanceRecord,
    pub censoring: Option<CensoringRecord>,
    pub outcome: OutcomeRecord,
    pub layout: ThetaLayout,
    pub weights: WeightDiagnostics,
    pub sandwich: SandwichRecord,
    pub surface_path: String,
    pub surface_long_path: String,
    pub panel_path: Option<String>,
    pub teh: Option<TehRecord>,
}

#[derive(Debug, Serialize)]
pub struct SimulateBody {
    pub config: ResolvedSimulation,
    pub intercepts: BalancingIntercepts,
    pub cohort_path: String,
    pub persons: usize,
}

#[derive(Debug, Serialize)]
pub struct ReplicateBody {
    pub config: ResolvedSimulation,
    pub cells: Vec<vetrial_core::msm::GridCell>,
    pub summary_path: String,
    pub failures: usize,
}

#[derive(Debug, Serialize)]
pub struct OracleBody {
    pub config: OracleSection,
    pub report_path: String,
    pub worst_ipw_gap: f64,
    pub worst_brute_force_gap: f64,
    pub passed: usize,
}
