//! Simulation study: scenarios, data generation, replication and the
//! exact small-instance oracle.

pub mod dgp;
pub mod oracle;
pub mod replicate;
pub mod scenario;

pub use dgp::{balancing_intercepts, gen_covariates, gen_outcomes, gen_uptake, simulate_cohort, BalancingIntercepts, CalibrationError};
pub use oracle::{max_discrepancies, random_instance, OracleError, TinyInstance};
pub use replicate::{
    calibrate, correctly_specified_config, run_replication, summarize, AnalysisPlan, CellSummary, PlanEstimate, PlanSummary,
    ReplicateResult, ReplicationConfig, ReplicationSummary, TehStat,
};
pub use scenario::{ScenarioError, SimScenario, SUMMARY_CELLS};
