//! Analytic cohort records and their expansion into emulated-trial panels.
//!
//! Calendar time is measured in integer weeks from the calendar origin.
//! Trial `j` enrolls at calendar week `j`; week-on-trial `k` falls at
//! calendar week `j + k`. A first dose given during calendar week `l` is
//! recorded as `v1 = l + 1`, so `Z_j = I(v1 <= j + 1)`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

/// Calendar week of a vaccine dose, or `Never` when no such dose was observed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum DoseWeek {
    Week(u32),
    Never,
}

impl DoseWeek {
    /// `self <= week`, treating `Never` as +infinity.
    #[inline]
    pub fn at_or_before(self, week: u32) -> bool {
        matches!(self, DoseWeek::Week(v) if v <= week)
    }

    pub fn week(self) -> Option<u32> {
        match self {
            DoseWeek::Week(v) => Some(v),
            DoseWeek::Never => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, DoseWeek::Week(_))
    }
}

impl fmt::Display for DoseWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DoseWeek::Week(v) => write!(f, "{v}"),
            DoseWeek::Never => Ok(()),
        }
    }
}

/// One person's observed data `(T*, Δ, S, S*, V, X)`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParticipantRecord {
    pub id: String,
    /// Event or censoring week; `tau + 1` for people followed event-free to the end.
    pub t_star: u32,
    pub delta: bool,
    /// First eligible calendar week.
    pub s: u32,
    /// Last eligible calendar week.
    pub s_star: u32,
    pub doses: [DoseWeek; 3],
    pub x: Vec<f64>,
}

impl ParticipantRecord {
    #[inline]
    pub fn v1(&self) -> DoseWeek {
        self.doses[0]
    }

    /// Last trial this person is actually enrolled in: eligibility ends at
    /// `s_star`, at the trial where they initiate the active regimen, or at
    /// the week before their event or loss to follow-up, whichever is first.
    pub fn last_enrolled_trial(&self, protocol: &ProtocolConfig) -> Option<u32> {
        let mut last = self.s_star.min(protocol.max_trial());
        if let DoseWeek::Week(v1) = self.v1() {
            last = last.min(v1.saturating_sub(1));
        }
        last = last.min(self.t_star.saturating_sub(1));
        (self.t_star > self.s && last >= self.s).then_some(last)
    }

    pub fn is_enrolled(&self, j: u32, protocol: &ProtocolConfig) -> bool {
        self.last_enrolled_trial(protocol)
            .is_some_and(|last| self.s <= j && j <= last)
    }
}

/// Trial calendar and regimen protocol.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProtocolConfig {
    /// `J + 1`.
    pub num_trials: u32,
    /// Administrative censoring week.
    pub tau: u32,
    /// Weeks allowed between the first and second dose.
    pub dose2_window: u32,
    pub week0_date: Option<String>,
}

impl ProtocolConfig {
    pub fn new(num_trials: u32, tau: u32) -> Result<Self, CohortError> {
        let p = ProtocolConfig { num_trials, tau, dose2_window: 6, week0_date: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CohortError> {
        if self.num_trials == 0 {
            return Err(CohortError::Protocol("num_trials must be positive".into()));
        }
        if self.max_trial() >= self.tau {
            return Err(CohortError::Protocol(alloc::format!(
                "last trial {} must start before tau = {}",
                self.max_trial(),
                self.tau
            )));
        }
        if self.dose2_window == 0 {
            return Err(CohortError::Protocol("dose2_window must be at least 1".into()));
        }
        Ok(())
    }

    /// `J`.
    #[inline]
    pub fn max_trial(&self) -> u32 {
        self.num_trials - 1
    }

    /// `K_j = tau - j`.
    #[inline]
    pub fn follow_up(&self, j: u32) -> u32 {
        self.tau - j
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("invalid protocol: {0}")]
    Protocol(String),
    #[error("record {id}: {reason}")]
    Validation { id: String, reason: String },
    #[error("record {id}: trial {j} week {k} is outside its eligibility window")]
    Domain { id: String, j: u32, k: u32 },
    #[error("record {id}: expected {expected} covariates, found {found}")]
    CovariateCount { id: String, expected: usize, found: usize },
}

/// Checks the record invariants against the protocol.
pub fn validate_record(rec: &ParticipantRecord, protocol: &ProtocolConfig) -> Result<(), CohortError> {
    let fail = |reason: String| Err(CohortError::Validation { id: rec.id.clone(), reason });
    if rec.s > rec.s_star {
        return fail(alloc::format!("s = {} exceeds s_star = {}", rec.s, rec.s_star));
    }
    if rec.s_star > protocol.max_trial() {
        return fail(alloc::format!(
            "s_star = {} is after the last trial {}",
            rec.s_star,
            protocol.max_trial()
        ));
    }
    if rec.t_star <= rec.s {
        return fail(alloc::format!("t_star = {} is not after cohort entry s = {}", rec.t_star, rec.s));
    }
    if rec.t_star > protocol.tau + 1 {
        return fail(alloc::format!("t_star = {} exceeds tau + 1 = {}", rec.t_star, protocol.tau + 1));
    }
    if rec.delta && rec.t_star > protocol.tau {
        return fail(alloc::format!("event at t_star = {} is after tau = {}", rec.t_star, protocol.tau));
    }
    for q in 1..3 {
        match (rec.doses[q - 1], rec.doses[q]) {
            (DoseWeek::Never, DoseWeek::Week(_)) => {
                return fail(alloc::format!("dose {} recorded without dose {}", q + 1, q));
            }
            (DoseWeek::Week(a), DoseWeek::Week(b)) if b <= a => {
                return fail(alloc::format!("dose {} (week {b}) does not follow dose {q} (week {a})", q + 1));
            }
            _ => {}
        }
    }
    if let DoseWeek::Week(v1) = rec.v1() {
        if v1 <= rec.s {
            return fail(alloc::format!("first dose v1 = {v1} precedes cohort entry s = {}", rec.s));
        }
    }
    Ok(())
}

fn check_window(rec: &ParticipantRecord, j: u32, k: u32, protocol: &ProtocolConfig) -> Result<(), CohortError> {
    if rec.is_enrolled(j, protocol) && k <= protocol.follow_up(j) {
        Ok(())
    } else {
        Err(CohortError::Domain { id: rec.id.clone(), j, k })
    }
}

/// `Z_j = I(v1 <= j + 1)` for `s <= j <= s_star`.
pub fn uptake_indicator(rec: &ParticipantRecord, j: u32) -> Result<bool, CohortError> {
    if j < rec.s || j > rec.s_star {
        return Err(CohortError::Domain { id: rec.id.clone(), j, k: 0 });
    }
    Ok(rec.v1().at_or_before(j + 1))
}

fn raw_uncensored(rec: &ParticipantRecord, j: u32, k: u32, z: bool, window: u32) -> bool {
    let cal = j + k;
    let deviates_comparator = !z && rec.doses[0].at_or_before(cal + 1);
    let late_second_dose = z
        && k >= window
        && match (rec.doses[0], rec.doses[1]) {
            (DoseWeek::Week(v1), DoseWeek::Week(v2)) => v2 - v1 > window,
            _ => true,
        };
    let extra_dose = z && rec.doses[2].at_or_before(cal);
    let lost = !rec.delta && rec.t_star <= cal;
    !(deviates_comparator || late_second_dose || extra_dose || lost)
}

/// `R_j(k)`: 1 while the trial-`j` record remains uncensored at week `k`.
pub fn censor_indicator(
    rec: &ParticipantRecord,
    j: u32,
    k: u32,
    protocol: &ProtocolConfig,
) -> Result<bool, CohortError> {
    check_window(rec, j, k, protocol)?;
    let z = rec.v1().at_or_before(j + 1);
    Ok(raw_uncensored(rec, j, k, z, protocol.dose2_window))
}

/// `Y_j(k) = I(T* <= j + k, Δ = 1)`.
pub fn event_indicator(
    rec: &ParticipantRecord,
    j: u32,
    k: u32,
    protocol: &ProtocolConfig,
) -> Result<bool, CohortError> {
    check_window(rec, j, k, protocol)?;
    Ok(raw_event(rec, j, k))
}

#[inline]
fn raw_event(rec: &ParticipantRecord, j: u32, k: u32) -> bool {
    rec.delta && rec.t_star <= j + k
}

/// One row of the expanded panel.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PersonTrialWeek {
    /// Index of the person in the panel's person table.
    pub person: u32,
    pub j: u32,
    pub k: u32,
    pub z: bool,
    pub r: bool,
    pub y: bool,
    /// `R_j(k-1) = 1` and `Y_j(k-1) = 0`; false at `k = 0`.
    pub at_risk: bool,
    pub weight: f64,
}

/// Long-format panel. Rows are ordered by `(person, j, k)` and end at the
/// first censored or event week of each person-trial.
#[derive(Clone, Debug, Default)]
pub struct Panel {
    pub rows: Vec<PersonTrialWeek>,
    pub ids: Vec<String>,
    /// Row-major `persons x num_covariates`.
    pub covariates: Vec<f64>,
    pub num_covariates: usize,
    pub protocol: Option<ProtocolConfig>,
}

impl Panel {
    pub fn num_persons(&self) -> usize {
        self.ids.len()
    }

    #[inline]
    pub fn x(&self, person: u32) -> &[f64] {
        let p = self.num_covariates;
        let i = person as usize;
        &self.covariates[i * p..(i + 1) * p]
    }

    pub fn protocol(&self) -> &ProtocolConfig {
        self.protocol.as_ref().expect("panel built without a protocol")
    }

    /// Half-open row ranges, one per person, in person order. Persons with
    /// no enrolled trial get an empty range.
    pub fn person_ranges(&self) -> Vec<core::ops::Range<usize>> {
        let mut out = alloc::vec![0..0; self.num_persons()];
        let mut start = 0;
        while start < self.rows.len() {
            let p = self.rows[start].person;
            let mut end = start + 1;
            while end < self.rows.len() && self.rows[end].person == p {
                end += 1;
            }
            out[p as usize] = start..end;
            start = end;
        }
        out
    }

    /// Half-open row ranges, one per person-trial.
    pub fn person_trial_ranges(&self) -> Vec<core::ops::Range<usize>> {
        let mut out = Vec::new();
        let mut start = 0;
        while start < self.rows.len() {
            let (p, j) = (self.rows[start].person, self.rows[start].j);
            let mut end = start + 1;
            while end < self.rows.len() && self.rows[end].person == p && self.rows[end].j == j {
                end += 1;
            }
            out.push(start..end);
            start = end;
        }
        out
    }
}

/// Expands the cohort into person-trial-week rows.
///
/// Each person is enrolled in every trial from `s` through
/// [`ParticipantRecord::last_enrolled_trial`]; rows run from `k = 0` and stop
/// after the first week with `r = 0` or `y = 1`.
pub fn expand_trials(
    cohort: &[ParticipantRecord],
    protocol: &ProtocolConfig,
) -> Result<Panel, CohortError> {
    protocol.validate()?;
    let num_covariates = cohort.first().map_or(0, |r| r.x.len());
    let mut panel = Panel {
        rows: Vec::new(),
        ids: Vec::with_capacity(cohort.len()),
        covariates: Vec::with_capacity(cohort.len() * num_covariates),
        num_covariates,
        protocol: Some(protocol.clone()),
    };
    for (i, rec) in cohort.iter().enumerate() {
        validate_record(rec, protocol)?;
        if rec.x.len() != num_covariates {
            return Err(CohortError::CovariateCount {
                id: rec.id.clone(),
                expected: num_covariates,
                found: rec.x.len(),
            });
        }
        panel.ids.push(rec.id.clone());
        panel.covariates.extend_from_slice(&rec.x);
        expand_person(rec, i as u32, protocol, &mut panel.rows);
    }
    Ok(panel)
}

fn expand_person(rec: &ParticipantRecord, person: u32, protocol: &ProtocolConfig, out: &mut Vec<PersonTrialWeek>) {
    let Some(last) = rec.last_enrolled_trial(protocol) else {
        return;
    };
    for j in rec.s..=last {
        let z = rec.v1().at_or_before(j + 1);
        for k in 0..=protocol.follow_up(j) {
            let r = raw_uncensored(rec, j, k, z, protocol.dose2_window);
            let y = raw_event(rec, j, k);
            out.push(PersonTrialWeek { person, j, k, z, r, y, at_risk: k > 0, weight: 1.0 });
            if !r || y {
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    pub(crate) fn figure1() -> ParticipantRecord {
        ParticipantRecord {
            id: "fig1".into(),
            t_star: 4,
            delta: true,
            s: 0,
            s_star: 2,
            doses: [DoseWeek::Week(3), DoseWeek::Never, DoseWeek::Never],
            x: vec![],
        }
    }

    fn protocol() -> ProtocolConfig {
        ProtocolConfig::new(13, 20).unwrap()
    }

    #[test]
    fn figure1_indicators() {
        let rec = figure1();
        let p = protocol();
        let z: Vec<bool> = (0..3).map(|j| uptake_indicator(&rec, j).unwrap()).collect();
        assert_eq!(z, vec![false, false, true]);
        assert!(censor_indicator(&rec, 0, 1, &p).unwrap());
        assert!(!censor_indicator(&rec, 0, 2, &p).unwrap());
        assert!(!censor_indicator(&rec, 1, 1, &p).unwrap());
        assert!(event_indicator(&rec, 2, 2, &p).unwrap());
        assert!(!event_indicator(&rec, 2, 1, &p).unwrap());
        assert!(censor_indicator(&rec, 3, 1, &p).is_err());
    }

    #[test]
    fn figure1_expansion() {
        let panel = expand_trials(&[figure1()], &protocol()).unwrap();
        let shape: Vec<(u32, u32, bool, bool, bool)> =
            panel.rows.iter().map(|r| (r.j, r.k, r.z, r.r, r.y)).collect();
        assert_eq!(
            shape,
            vec![
                (0, 0, false, true, false),
                (0, 1, false, true, false),
                (0, 2, false, false, false),
                (1, 0, false, true, false),
                (1, 1, false, false, false),
                (2, 0, true, true, false),
                (2, 1, true, true, false),
                (2, 2, true, true, true),
            ]
        );
    }

    #[test]
    fn vaccinated_at_entry_has_single_trial() {
        let rec = ParticipantRecord {
            id: "a".into(),
            t_star: 21,
            delta: false,
            s: 0,
            s_star: 0,
            doses: [DoseWeek::Week(1), DoseWeek::Week(3), DoseWeek::Never],
            x: vec![],
        };
        let panel = expand_trials(&[rec], &protocol()).unwrap();
        assert!(panel.rows.iter().all(|r| r.j == 0 && r.z));
        assert_eq!(panel.rows.len(), 21);
    }

    #[test]
    fn never_vaccinated_full_follow_up() {
        let p = protocol();
        let rec = ParticipantRecord {
            id: "u".into(),
            t_star: 21,
            delta: false,
            s: 2,
            s_star: 5,
            doses: [DoseWeek::Never; 3],
            x: vec![],
        };
        for j in 2..=5 {
            for k in 0..=p.follow_up(j) {
                assert!(censor_indicator(&rec, j, k, &p).unwrap());
            }
        }
        let panel = expand_trials(&[rec], &p).unwrap();
        for j in 2..=5u32 {
            let n = panel.rows.iter().filter(|r| r.j == j).count() as u32;
            assert_eq!(n, p.follow_up(j) + 1);
        }
        assert!(panel.rows.iter().all(|r| r.r && !r.y && !r.z));
    }

    #[test]
    fn late_second_dose_censors_at_window() {
        let p = protocol();
        let rec = ParticipantRecord {
            id: "late".into(),
            t_star: 21,
            delta: false,
            s: 0,
            s_star: 0,
            doses: [DoseWeek::Week(1), DoseWeek::Week(9), DoseWeek::Never],
            x: vec![],
        };
        assert!(censor_indicator(&rec, 0, 5, &p).unwrap());
        assert!(!censor_indicator(&rec, 0, 6, &p).unwrap());
        let third = ParticipantRecord {
            doses: [DoseWeek::Week(1), DoseWeek::Week(4), DoseWeek::Week(10)],
            ..rec
        };
        assert!(censor_indicator(&third, 0, 9, &p).unwrap());
        assert!(!censor_indicator(&third, 0, 10, &p).unwrap());
    }

    #[test]
    fn validation_errors() {
        let p = protocol();
        let mut rec = figure1();
        rec.s_star = 0;
        rec.s = 1;
        assert!(matches!(validate_record(&rec, &p), Err(CohortError::Validation { .. })));
        let mut rec = figure1();
        rec.doses = [DoseWeek::Never, DoseWeek::Week(5), DoseWeek::Never];
        assert!(validate_record(&rec, &p).is_err());
        let mut rec = figure1();
        rec.doses = [DoseWeek::Week(5), DoseWeek::Week(5), DoseWeek::Never];
        assert!(validate_record(&rec, &p).is_err());
        assert!(ProtocolConfig::new(21, 20).is_err());
    }
}
