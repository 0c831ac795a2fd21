//! Monte Carlo replication harness and its summary table.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cohort::{expand_trials, ProtocolConfig};
use crate::math::{expm1, normal_quantile, sqrt};
use crate::msm::{GridCell, MsmFamily};
use crate::pipeline::{
    analyze_panel, AnalysisConfig, CensoringTemplate, OutcomeTemplate, PropensityTemplate, TermTemplate,
};
use crate::sim::dgp::{balancing_intercepts, gen_covariates, simulate_cohort, BalancingIntercepts, CalibrationError};
use crate::sim::scenario::{SimScenario, SUMMARY_CELLS};
use crate::weights::CensoredArms;

/// One outcome-model analysis run on every replicate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnalysisPlan {
    pub family: MsmFamily,
    /// Spline time terms everywhere instead of quadratics.
    pub spline: bool,
    pub teh: bool,
}

impl AnalysisPlan {
    pub fn label(&self) -> String {
        let family = match self.family {
            MsmFamily::CalendarAndTsv => "eq3",
            MsmFamily::TrialSpecific => "eq4",
            MsmFamily::TsvOnly => "eq5",
        };
        alloc::format!("{family}-{}", if self.spline { "spline" } else { "poly" })
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicationConfig {
    /// Carries `n`, `tau` and the number of trials.
    pub scenario: SimScenario,
    pub reps: u64,
    pub seed: u64,
    pub plans: Vec<AnalysisPlan>,
    pub cells: Vec<GridCell>,
    pub truncation: Option<f64>,
    pub gamma: f64,
    /// Size of the covariate sample used to calibrate intercepts.
    pub calibration_n: usize,
}

impl ReplicationConfig {
    pub fn new(scenario: SimScenario, reps: u64, seed: u64, plans: Vec<AnalysisPlan>) -> Self {
        ReplicationConfig {
            scenario,
            reps,
            seed,
            plans,
            cells: SUMMARY_CELLS.to_vec(),
            truncation: None,
            gamma: 0.05,
            calibration_n: 100_000,
        }
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            num_trials: self.scenario.num_trials,
            tau: self.scenario.tau,
            dose2_window: 6,
            week0_date: None,
        }
    }

    /// Seed of replication `r`.
    pub fn rep_seed(&self, r: u64) -> u64 {
        self.seed ^ r
    }
}

/// The analysis matching the generator: quadratic (or spline) time terms in
/// every model, all three covariates, censoring modeled in the comparator
/// arm only.
pub fn correctly_specified_config(plans: &[AnalysisPlan], spline: bool, cells: &[GridCell], truncation: Option<f64>, gamma: f64) -> AnalysisConfig {
    let time = || if spline { TermTemplate::default_spline() } else { TermTemplate::Polynomial(2) };
    AnalysisConfig {
        propensity: PropensityTemplate { trial: time(), covariates: alloc::vec![0, 1, 2] },
        censoring: Some(CensoringTemplate {
            trial: TermTemplate::Empty,
            trial_time: TermTemplate::Empty,
            calendar: time(),
            regimen_term: false,
            covariates: alloc::vec![0, 1, 2],
            arms: CensoredArms::ComparatorOnly,
        }),
        outcomes: plans
            .iter()
            .map(|p| OutcomeTemplate {
                family: p.family,
                f1: time(),
                f2: time(),
                f3: time(),
                grid: Some(cells.to_vec()),
                teh: p.teh,
                teh_k_max: None,
            })
            .collect(),
        truncation,
        gamma,
    }
}

/// Intercepts calibrated against a covariate sample drawn from `!seed`.
pub fn calibrate(config: &ReplicationConfig) -> Result<BalancingIntercepts, CalibrationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(!config.seed);
    let sample = gen_covariates(config.calibration_n, &mut rng);
    balancing_intercepts(&config.scenario, &sample)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TehStat {
    pub u_beta: f64,
    pub p_one_sided: f64,
    pub p_two_sided: f64,
}

/// Per-cell `(log RR, SE)` from one plan on one replicate.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanEstimate {
    pub log_rr: Vec<f64>,
    pub se: Vec<f64>,
    pub teh: Option<TehStat>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicateResult {
    pub rep: u64,
    /// One entry per plan, in config order; failures keep their message.
    pub plans: Vec<Result<PlanEstimate, String>>,
}

/// Simulates replicate `r` and runs every plan. Plans sharing the spline
/// toggle share nuisance models and one stacked variance.
pub fn run_replication(config: &ReplicationConfig, iota: &BalancingIntercepts, r: u64) -> ReplicateResult {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rep_seed(r));
    let cohort = simulate_cohort(&config.scenario, iota, &mut rng);
    let mut out: Vec<Option<Result<PlanEstimate, String>>> = alloc::vec![None; config.plans.len()];
    let panel = match expand_trials(&cohort, &config.protocol()) {
        Ok(p) => p,
        Err(e) => {
            let msg = e.to_string();
            return ReplicateResult { rep: r, plans: config.plans.iter().map(|_| Err(msg.clone())).collect() };
        }
    };
    for spline in [false, true] {
        let members: Vec<usize> = (0..config.plans.len()).filter(|&i| config.plans[i].spline == spline).collect();
        if members.is_empty() {
            continue;
        }
        let plans: Vec<AnalysisPlan> = members.iter().map(|&i| config.plans[i]).collect();
        let analysis = correctly_specified_config(&plans, spline, &config.cells, config.truncation, config.gamma);
        let mut panel = panel.clone();
        match analyze_panel(&mut panel, &analysis) {
            Ok(res) => {
                for (&i, o) in members.iter().zip(res.outcomes) {
                    let (log_rr, se) = config
                        .cells
                        .iter()
                        .map(|c| {
                            let cell = o.surface.get(c.j, c.k).expect("grid cell reported");
                            (cell.log_rr, cell.se_log_rr.unwrap_or(f64::NAN))
                        })
                        .unzip();
                    let teh = o.teh.map(|t| TehStat { u_beta: t.u_beta, p_one_sided: t.p_one_sided, p_two_sided: t.p_two_sided });
                    out[i] = Some(Ok(PlanEstimate { log_rr, se, teh }));
                }
            }
            Err(e) => {
                for &i in &members {
                    out[i] = Some(Err(e.to_string()));
                }
            }
        }
    }
    ReplicateResult { rep: r, plans: out.into_iter().map(|o| o.expect("every plan visited")).collect() }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CellSummary {
    pub cell: GridCell,
    /// Percent.
    pub true_ve: f64,
    /// Mean estimated VE minus the truth, in percentage points.
    pub bias: f64,
    /// Monte Carlo SD of the log RR, times 100.
    pub ese: f64,
    /// Mean sandwich SE of the log RR, times 100.
    pub ase: f64,
    /// Percent of intervals covering the truth.
    pub coverage: f64,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PlanSummary {
    pub plan: AnalysisPlan,
    pub cells: Vec<CellSummary>,
    pub successes: u64,
    pub failures: Vec<(u64, String)>,
    /// Percent of replicates rejecting at level 0.05.
    pub teh_reject_one_sided: Option<f64>,
    pub teh_reject_two_sided: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ReplicationSummary {
    pub scenario: u8,
    pub reps: u64,
    pub n: usize,
    pub seed: u64,
    pub plans: Vec<PlanSummary>,
}

/// Aggregates replicate results. Results are ordered by replicate index
/// first, so the summary does not depend on completion order.
pub fn summarize(config: &ReplicationConfig, results: &[ReplicateResult]) -> ReplicationSummary {
    let mut ordered: Vec<&ReplicateResult> = results.iter().collect();
    ordered.sort_by_key(|r| r.rep);
    let zq = normal_quantile(1.0 - config.gamma / 2.0);
    let plans = config
        .plans
        .iter()
        .enumerate()
        .map(|(p, plan)| {
            let mut failures = Vec::new();
            let mut ok = Vec::new();
            for r in &ordered {
                match &r.plans[p] {
                    Ok(e) => ok.push(e),
                    Err(msg) => failures.push((r.rep, msg.clone())),
                }
            }
            let m = ok.len() as f64;
            let cells = config
                .cells
                .iter()
                .enumerate()
                .map(|(c, cell)| {
                    let truth = config.scenario.true_log_rr(cell.j, cell.k);
                    let true_ve = -expm1(truth);
                    let mean_ve = ok.iter().map(|e| -expm1(e.log_rr[c])).sum::<f64>() / m;
                    let mean_rho = ok.iter().map(|e| e.log_rr[c]).sum::<f64>() / m;
                    let ss = ok.iter().map(|e| (e.log_rr[c] - mean_rho) * (e.log_rr[c] - mean_rho)).sum::<f64>();
                    let ese = if ok.len() > 1 { sqrt(ss / (m - 1.0)) } else { f64::NAN };
                    let ase = ok.iter().map(|e| e.se[c]).sum::<f64>() / m;
                    let covered = ok
                        .iter()
                        .filter(|e| (e.log_rr[c] - truth).abs() <= zq * e.se[c])
                        .count() as f64;
                    CellSummary {
                        cell: *cell,
                        true_ve: 100.0 * true_ve,
                        bias: 100.0 * (mean_ve - true_ve),
                        ese: 100.0 * ese,
                        ase: 100.0 * ase,
                        coverage: 100.0 * covered / m,
                    }
                })
                .collect();
            let rate = |f: fn(&TehStat) -> f64| -> Option<f64> {
                plan.teh.then(|| {
                    let hits = ok.iter().filter(|e| e.teh.as_ref().is_some_and(|t| f(t) < 0.05)).count();
                    100.0 * hits as f64 / m
                })
            };
            PlanSummary {
                plan: *plan,
                cells,
                successes: ok.len() as u64,
                failures,
                teh_reject_one_sided: rate(|t| t.p_one_sided),
                teh_reject_two_sided: rate(|t| t.p_two_sided),
            }
        })
        .collect();
    ReplicationSummary { scenario: config.scenario.id, reps: config.reps, n: config.scenario.n, seed: config.seed, plans }
}

impl ReplicationSummary {
    /// Tab-separated table with one row per plan and cell, followed by TEH
    /// rejection rates and any failures. Numbers use fixed precision so
    /// equal inputs give equal bytes.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# scenario={} reps={} n={} seed={}", self.scenario, self.reps, self.n, self.seed);
        s.push_str("model\testimand\ttrue\tbias\tese_x100\tase_x100\tcoverage\n");
        for p in &self.plans {
            let label = p.plan.label();
            for c in &p.cells {
                let _ = writeln!(
                    s,
                    "{label}\tVE_{}({})\t{:.1}\t{:.1}\t{:.1}\t{:.1}\t{:.1}",
                    c.cell.j, c.cell.k, c.true_ve, c.bias, c.ese, c.ase, c.coverage
                );
            }
        }
        for p in &self.plans {
            if let (Some(one), Some(two)) = (p.teh_reject_one_sided, p.teh_reject_two_sided) {
                let _ = writeln!(s, "# {} teh rejection: one-sided {:.1}% two-sided {:.1}%", p.plan.label(), one, two);
            }
            let _ = writeln!(s, "# {} fitted {} of {}", p.plan.label(), p.successes, self.reps);
            for (rep, msg) in &p.failures {
                let _ = writeln!(s, "# {} replicate {rep} failed: {msg}", p.plan.label());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(rep: u64, rho: f64, se: f64) -> ReplicateResult {
        let est = PlanEstimate { log_rr: alloc::vec![rho], se: alloc::vec![se], teh: None };
        ReplicateResult { rep, plans: alloc::vec![Ok(est)] }
    }

    fn one_cell_config() -> ReplicationConfig {
        let plan = AnalysisPlan { family: MsmFamily::CalendarAndTsv, spline: false, teh: false };
        let mut c = ReplicationConfig::new(SimScenario::new(1).unwrap(), 3, 7, alloc::vec![plan]);
        c.cells = alloc::vec![GridCell { j: 0, k: 5 }];
        c
    }

    #[test]
    fn summary_is_order_independent() {
        let config = one_cell_config();
        let truth = config.scenario.true_log_rr(0, 5);
        let a = [fake(0, truth + 0.1, 0.1), fake(1, truth - 0.3, 0.1), fake(2, truth, 0.2)];
        let b = [a[2].clone(), a[0].clone(), a[1].clone()];
        assert_eq!(summarize(&config, &a).to_table(), summarize(&config, &b).to_table());
        let s = summarize(&config, &a);
        let cell = &s.plans[0].cells[0];
        // Two of the three intervals cover.
        assert!((cell.coverage - 200.0 / 3.0).abs() < 1e-9);
        assert!((cell.ase - 40.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn failures_are_reported() {
        let config = one_cell_config();
        let truth = config.scenario.true_log_rr(0, 5);
        let results = [
            fake(0, truth, 0.1),
            ReplicateResult { rep: 1, plans: alloc::vec![Err("stage `nuisance`: boom".into())] },
        ];
        let s = summarize(&config, &results);
        assert_eq!(s.plans[0].successes, 1);
        assert!(s.to_table().contains("replicate 1 failed: stage `nuisance`: boom"));
    }

    #[test]
    fn derived_seeds_follow_xor() {
        let config = one_cell_config();
        assert_eq!(config.rep_seed(0), 7);
        assert_eq!(config.rep_seed(5), 2);
    }
}
