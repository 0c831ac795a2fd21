//! Nested trial emulation (NTE) estimators for vaccine effectiveness.
//!
//! The crate expands a person-level observational cohort into a sequence of
//! emulated trials, fits inverse-probability-weighted marginal structural
//! models for the counterfactual discrete-time hazards, and reports the
//! vaccine effectiveness surface `VE_j(k) = 1 - RR_j(k)` over trial `j` and
//! week-on-trial `k` with empirical sandwich confidence intervals. A
//! homogeneity test across trials and a simulation harness are included.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, configuration
//! and the command-line driver live in the `vetrial` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod cohort;
pub mod glm;
pub mod linalg;
pub mod math;
pub mod mestimation;
pub mod msm;
pub mod pipeline;
pub mod sim;
pub mod splines;
pub mod terms;
pub mod weights;

pub use cohort::{
    expand_trials, DoseWeek, Panel, ParticipantRecord, PersonTrialWeek, ProtocolConfig,
};
pub use glm::{fit_weighted_logistic, predict_prob, FitResult};
pub use linalg::Matrix;
pub use mestimation::{SandwichOutput, TehResult, ThetaHat};
pub use msm::{GridCell, ModelSpec, MsmFamily, VESurface};
pub use splines::SplineSpec;
pub use terms::TimeBasis;
pub use weights::{CensoringSpec, NuisanceFits, PropensitySpec};
