//! Data-generating process: covariates, first-dose uptake, calibrated
//! outcome hazards, and the observed cohort.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::cohort::{DoseWeek, ParticipantRecord};
use crate::math::{expit, fabs, logit};
use crate::sim::scenario::SimScenario;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("target hazard {0} is outside (0, 1)")]
    Target(f64),
    #[error("calibration sample is empty")]
    EmptySample,
}

/// `(age, sex, comorbidity)` for `n` people.
pub fn gen_covariates<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            let x1 = fabs(7.0 * z) + 80.0;
            let dx = x1 - 86.2;
            let x2 = bernoulli(rng, expit(-0.42 - 0.047 * dx));
            let x3 = bernoulli(rng, expit(0.44 + 0.009 * dx + 0.37 * x2));
            [x1, x2, x3]
        })
        .collect()
}

#[inline]
fn bernoulli<R: Rng + ?Sized>(rng: &mut R, p: f64) -> f64 {
    if rng.random::<f64>() < p {
        1.0
    } else {
        0.0
    }
}

/// Weekly absorbing uptake draws for `j = 0..=tau`; a first dose in week
/// `j` is recorded as `v1 = j + 1`.
pub fn gen_uptake<R: Rng + ?Sized>(scenario: &SimScenario, x: &[f64; 3], rng: &mut R) -> DoseWeek {
    for j in 0..=scenario.tau {
        if rng.random::<f64>() < scenario.uptake_prob(j, x) {
            return DoseWeek::Week(j + 1);
        }
    }
    DoseWeek::Never
}

/// Calibrated intercepts `iota`: the unvaccinated stream by calendar week
/// `m = 1..=tau`, and the vaccinated stream by dose week `j` and weeks since
/// dose `k = 1..=tau - j`.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BalancingIntercepts {
    /// Index `m`; entry 0 unused.
    pub unvaccinated: Vec<f64>,
    /// `vaccinated[j][k]`; entry `k = 0` unused.
    pub vaccinated: Vec<Vec<f64>>,
}

/// Solves `mean_i expit(iota + shift_i) = target` by Newton steps kept inside
/// a shrinking bisection bracket, to `|gap| < 1e-10`.
pub fn calibrate_intercept(shifts: &[f64], target: f64) -> Result<f64, CalibrationError> {
    if !(target > 0.0 && target < 1.0) {
        return Err(CalibrationError::Target(target));
    }
    if shifts.is_empty() {
        return Err(CalibrationError::EmptySample);
    }
    let n = shifts.len() as f64;
    let eval = |iota: f64| {
        let (mut m, mut d) = (0.0, 0.0);
        for s in shifts {
            let p = expit(iota + s);
            m += p;
            d += p * (1.0 - p);
        }
        (m / n - target, d / n)
    };
    let lo_shift = shifts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi_shift = shifts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (logit(target) - hi_shift - 1.0, logit(target) - lo_shift + 1.0);
    let mut iota = logit(target) - shifts.iter().sum::<f64>() / n;
    for _ in 0..200 {
        let (gap, slope) = eval(iota);
        if fabs(gap) < 1e-10 {
            return Ok(iota);
        }
        if gap > 0.0 {
            hi = iota;
        } else {
            lo = iota;
        }
        let newton = iota - gap / slope;
        iota = if slope > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    Ok(iota)
}

/// Calibrates every intercept the scenario needs against a baseline
/// covariate sample. Identical targets are solved once.
pub fn balancing_intercepts(
    scenario: &SimScenario,
    sample: &[[f64; 3]],
) -> Result<BalancingIntercepts, CalibrationError> {
    let shifts: Vec<f64> = sample.iter().map(|x| scenario.covariate_shift(x)).collect();
    let mut solved: BTreeMap<u64, f64> = BTreeMap::new();
    let mut solve = |target: f64| -> Result<f64, CalibrationError> {
        if let Some(v) = solved.get(&target.to_bits()) {
            return Ok(*v);
        }
        let v = calibrate_intercept(&shifts, target)?;
        solved.insert(target.to_bits(), v);
        Ok(v)
    };
    let tau = scenario.tau;
    let mut unvaccinated = vec![0.0; tau as usize + 1];
    for m in 1..=tau {
        unvaccinated[m as usize] = solve(scenario.lambda(0, m, false))?;
    }
    let mut vaccinated = Vec::with_capacity(tau as usize);
    for j in 0..tau {
        let mut row = vec![0.0; (tau - j) as usize + 1];
        for k in 1..=tau - j {
            row[k as usize] = solve(scenario.lambda(j, k, true))?;
        }
        vaccinated.push(row);
    }
    Ok(BalancingIntercepts { unvaccinated, vaccinated })
}

/// Weekly event draws for `m = 1..=tau`: the unvaccinated stream before the
/// first dose, then the vaccinated stream for the dose week. Returns
/// `(t_star, delta)`; people without an event get `(tau + 1, false)`.
pub fn gen_outcomes<R: Rng + ?Sized>(
    scenario: &SimScenario,
    x: &[f64; 3],
    v1: DoseWeek,
    iota: &BalancingIntercepts,
    rng: &mut R,
) -> (u32, bool) {
    let shift = scenario.covariate_shift(x);
    for m in 1..=scenario.tau {
        let eta = match v1 {
            DoseWeek::Week(v) if v <= m => iota.vaccinated[(v - 1) as usize][(m - v + 1) as usize],
            _ => iota.unvaccinated[m as usize],
        };
        if rng.random::<f64>() < expit(eta + shift) {
            return (m, true);
        }
    }
    (scenario.tau + 1, false)
}

/// One simulated cohort of `scenario.n` people.
///
/// Covariates are drawn for everyone first, then each person's uptake
/// path and outcome path. Uptake is drawn independently of outcomes, so a
/// recorded first dose may fall after the person's event.
pub fn simulate_cohort<R: Rng + ?Sized>(
    scenario: &SimScenario,
    iota: &BalancingIntercepts,
    rng: &mut R,
) -> Vec<ParticipantRecord> {
    let xs = gen_covariates(scenario.n, rng);
    let last_trial = scenario.num_trials - 1;
    xs.into_iter()
        .enumerate()
        .map(|(i, x)| {
            let v1 = gen_uptake(scenario, &x, rng);
            let (t_star, delta) = gen_outcomes(scenario, &x, v1, iota, rng);
            let mut s_star = last_trial.min(t_star - 1);
            if let DoseWeek::Week(v) = v1 {
                s_star = s_star.min(v - 1);
            }
            let v2 = match v1 {
                DoseWeek::Week(v) => DoseWeek::Week(v + 3),
                DoseWeek::Never => DoseWeek::Never,
            };
            ParticipantRecord {
                id: alloc::format!("{}", i + 1),
                t_star,
                delta,
                s: 0,
                s_star,
                doses: [v1, v2, DoseWeek::Never],
                x: x.to_vec(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{expand_trials, ProtocolConfig};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn covariate_ranges_and_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs = gen_covariates(200_000, &mut rng);
        assert!(xs.iter().all(|x| x[0] >= 80.0 && (x[1] == 0.0 || x[1] == 1.0)));
        let mean = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        // folded normal: 80 + 7 sqrt(2 / pi); sd of the mean ~ 0.01
        assert!((mean - 85.585_191_925_62).abs() < 0.05, "{mean}");
    }

    #[test]
    fn degenerate_calibration_is_logit() {
        let iota = calibrate_intercept(&[0.0; 10], 0.02).unwrap();
        assert_relative_eq!(iota, logit(0.02), epsilon = 1e-9);
        assert!(calibrate_intercept(&[0.0], 1.0).is_err());
    }

    #[test]
    fn calibration_hits_target_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = SimScenario::new(1).unwrap();
        let shifts: Vec<f64> = gen_covariates(5_000, &mut rng).iter().map(|x| s.covariate_shift(x)).collect();
        let mut prev = f64::NEG_INFINITY;
        for target in [0.001, 0.01, 0.018, 0.1, 0.5] {
            let iota = calibrate_intercept(&shifts, target).unwrap();
            let mean = shifts.iter().map(|c| expit(iota + c)).sum::<f64>() / shifts.len() as f64;
            assert!((mean - target).abs() < 1e-10);
            assert!(iota > prev);
            prev = iota;
        }
    }

    #[test]
    fn uptake_path_matches_indicator_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = SimScenario { n: 2_000, ..SimScenario::new(1).unwrap() };
        let sample = gen_covariates(10_000, &mut rng);
        let iota = balancing_intercepts(&s, &sample).unwrap();
        let cohort = simulate_cohort(&s, &iota, &mut rng);
        let protocol = ProtocolConfig::new(13, 20).unwrap();
        let panel = expand_trials(&cohort, &protocol).unwrap();
        for r in panel.rows.iter().filter(|r| r.k == 0) {
            let rec = &cohort[r.person as usize];
            assert_eq!(r.z, rec.v1().at_or_before(r.j + 1));
        }
        // Z is non-decreasing over a person's trials and only the last can be 1.
        for range in panel.person_ranges() {
            let zs: Vec<(u32, bool)> = panel.rows[range].iter().filter(|r| r.k == 0).map(|r| (r.j, r.z)).collect();
            assert!(zs.iter().rev().skip(1).all(|(_, z)| !z));
        }
    }

    #[test]
    fn figure_one_pattern_from_generator_output() {
        let rec = ParticipantRecord {
            id: "g".into(),
            t_star: 4,
            delta: true,
            s: 0,
            s_star: 2u32.min(4 - 1).min(3 - 1),
            doses: [DoseWeek::Week(3), DoseWeek::Week(6), DoseWeek::Never],
            x: vec![86.2, 0.0, 0.0],
        };
        let panel = expand_trials(&[rec], &ProtocolConfig::new(13, 20).unwrap()).unwrap();
        let ends: Vec<(u32, u32, bool, bool)> = panel
            .person_trial_ranges()
            .into_iter()
            .map(|r| {
                let last = panel.rows[r.end - 1];
                (last.j, last.k, last.r, last.y)
            })
            .collect();
        assert_eq!(ends, vec![(0, 2, false, false), (1, 1, false, false), (2, 2, true, true)]);
    }
}
