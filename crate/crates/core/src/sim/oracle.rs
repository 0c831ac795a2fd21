//! Exact counterfactual risks on small enumerable instances, computed three
//! ways: the g-formula, the inverse-probability-weighted plug-in over
//! every observable path, and brute force over latent weekly draws.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::cohort::{Panel, PersonTrialWeek, ProtocolConfig};
use crate::math::{expm1, log1p};
use crate::msm::{CellSums, ModelSpec, MsmFamily};
use crate::terms::TimeBasis;
use crate::weights::ip_weight;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("instance is too large to enumerate ({0})")]
    TooLarge(&'static str),
    #[error("instance is malformed: {0}")]
    Malformed(&'static str),
}

/// Exact per-trial laws over a finite covariate support.
///
/// All per-week vectors are indexed by `k - 1` for `k = 1..=tau - j`.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyInstance {
    pub num_trials: u32,
    pub tau: u32,
    /// `p_x[j][x]`: covariate law among trial-`j` enrollees.
    pub p_x: Vec<Vec<f64>>,
    /// `e[j][x]`: probability of the active regimen at trial entry.
    pub e: Vec<Vec<f64>>,
    /// `d[j][z][x][k - 1]`: probability of remaining uncensored at week `k`.
    pub d: Vec<[Vec<Vec<f64>>; 2]>,
    /// `h[j][z][x][k - 1]`: event hazard at week `k` under regimen `z`.
    pub h: Vec<[Vec<Vec<f64>>; 2]>,
}

impl TinyInstance {
    pub fn levels(&self) -> usize {
        self.p_x.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.num_trials == 0 || self.num_trials > 3 {
            return Err(OracleError::TooLarge("at most three trials"));
        }
        if self.tau > 5 || self.tau < self.num_trials {
            return Err(OracleError::TooLarge("tau must lie in [trials, 5]"));
        }
        let nt = self.num_trials as usize;
        if self.p_x.len() != nt || self.e.len() != nt || self.d.len() != nt || self.h.len() != nt {
            return Err(OracleError::Malformed("per-trial tables must cover every trial"));
        }
        let levels = self.levels();
        if levels == 0 || levels > 8 {
            return Err(OracleError::TooLarge("covariate support must have 1 to 8 levels"));
        }
        let prob = |v: f64| v > 0.0 && v < 1.0;
        for j in 0..nt {
            let weeks = (self.tau as usize) - j;
            if self.p_x[j].len() != levels || (self.p_x[j].iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(OracleError::Malformed("covariate law must sum to one"));
            }
            if self.e[j].len() != levels || !self.e[j].iter().all(|&v| prob(v)) {
                return Err(OracleError::Malformed("propensities must lie in (0, 1)"));
            }
            for z in 0..2 {
                for table in [&self.d[j][z], &self.h[j][z]] {
                    if table.len() != levels || table.iter().any(|w| w.len() != weeks || !w.iter().all(|&v| prob(v))) {
                        return Err(OracleError::Malformed("weekly probabilities must lie in (0, 1)"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// `E{Y^z_j(k) | enrolled}` as `sum_x P(x) [1 - prod_m (1 - h_jm(z, x))]`.
pub fn gformula_risk(inst: &TinyInstance, j: u32, k: u32, z: bool) -> f64 {
    let (ju, zu) = (j as usize, usize::from(z));
    (0..inst.levels())
        .map(|x| {
            let s: f64 = inst.h[ju][zu][x][..k as usize].iter().map(|h| log1p(-h)).sum();
            inst.p_x[ju][x] * -expm1(s)
        })
        .sum()
}

/// Risk from brute-force enumeration of the `2^k` latent weekly event draws
/// (the event occurs at the first week whose draw fires).
pub fn brute_force_risk(inst: &TinyInstance, j: u32, k: u32, z: bool) -> f64 {
    let (ju, zu) = (j as usize, usize::from(z));
    let mut total = 0.0;
    for x in 0..inst.levels() {
        let h = &inst.h[ju][zu][x];
        for bits in 0u32..(1 << k) {
            let mut p = 1.0;
            for m in 0..k as usize {
                p *= if bits & (1 << m) != 0 { h[m] } else { 1.0 - h[m] };
            }
            if bits != 0 {
                total += inst.p_x[ju][x] * p;
            }
        }
    }
    total
}

/// Every observable person-trial path of the instance as panel rows, with
/// its probability. Within a week censoring is resolved before the event.
pub fn enumerate_paths(inst: &TinyInstance) -> (Panel, Vec<f64>) {
    let mut rows = Vec::new();
    let mut path_prob = Vec::new();
    let mut person = 0u32;
    for j in 0..inst.num_trials {
        let ju = j as usize;
        let weeks = inst.tau - j;
        for x in 0..inst.levels() {
            for z in [false, true] {
                let zu = usize::from(z);
                let p_arm = if z { inst.e[ju][x] } else { 1.0 - inst.e[ju][x] };
                let (d, h) = (&inst.d[ju][zu][x], &inst.h[ju][zu][x]);
                // Path ending at week `last` by censoring, by event, or surviving.
                for last in 1..=weeks {
                    for outcome in 0..3 {
                        let survive_all = outcome == 2;
                        if survive_all && last != weeks {
                            continue;
                        }
                        let mut p = inst.p_x[ju][x] * p_arm;
                        let row = |k: u32, r: bool, y: bool| PersonTrialWeek {
                            person,
                            j,
                            k,
                            z,
                            r,
                            y,
                            at_risk: k > 0,
                            weight: 1.0,
                        };
                        rows.push(row(0, true, false));
                        path_prob.push(p);
                        for m in 1..last {
                            p *= d[m as usize - 1] * (1.0 - h[m as usize - 1]);
                            rows.push(row(m, true, false));
                            path_prob.push(0.0);
                        }
                        let (dm, hm) = (d[last as usize - 1], h[last as usize - 1]);
                        let (r, y) = match outcome {
                            0 => {
                                p *= 1.0 - dm;
                                (false, false)
                            }
                            1 => {
                                p *= dm * hm;
                                (true, true)
                            }
                            _ => {
                                p *= dm * (1.0 - hm);
                                (true, false)
                            }
                        };
                        rows.push(row(last, r, y));
                        path_prob.push(0.0);
                        // Every row of the path carries the path probability.
                        let start = path_prob.len() - (last as usize + 1);
                        path_prob[start..].iter_mut().for_each(|v| *v = p);
                        person += 1;
                    }
                }
            }
        }
    }
    let protocol = ProtocolConfig { num_trials: inst.num_trials, tau: inst.tau, dose2_window: 1, week0_date: None };
    let ids = (0..person).map(|i| alloc::format!("{i}")).collect();
    let mut covariates = Vec::with_capacity(person as usize);
    // Covariate level of each path, recovered in enumeration order.
    for j in 0..inst.num_trials {
        for x in 0..inst.levels() {
            for _z in 0..2 {
                for last in 1..=inst.tau - j {
                    let n = if last == inst.tau - j { 3 } else { 2 };
                    covariates.extend(core::iter::repeat_n(x as f64, n));
                }
            }
        }
    }
    let panel = Panel { rows, ids, covariates, num_covariates: 1, protocol: Some(protocol) };
    (panel, path_prob)
}

/// Risk from the weighted pooled hazards of the enumerated population,
/// weighting each row by its path probability times the exact inverse
/// probability weight.
pub fn ipw_risks(inst: &TinyInstance) -> Vec<[Vec<f64>; 2]> {
    let (panel, prob) = enumerate_paths(inst);
    let spec = ModelSpec {
        family: MsmFamily::TsvOnly,
        f1: TimeBasis::Empty,
        f2: TimeBasis::Empty,
        f3: TimeBasis::Empty,
        max_trial: inst.num_trials - 1,
        tau: inst.tau,
    };
    let mut cum_d = vec![1.0; panel.rows.len()];
    for (i, r) in panel.rows.iter().enumerate() {
        if r.k > 0 {
            let x = panel.x(r.person)[0] as usize;
            cum_d[i] = cum_d[i - 1] * inst.d[r.j as usize][usize::from(r.z)][x][r.k as usize - 1];
        }
    }
    let weight = |i: usize| {
        let r = &panel.rows[i];
        let x = panel.x(r.person)[0] as usize;
        prob[i] * ip_weight(r.z, inst.e[r.j as usize][x], cum_d[i])
    };
    let sums = CellSums::accumulate(&panel, &spec, weight).expect("paths lie in the study window");
    (0..inst.num_trials)
        .map(|j| {
            let arm = |z: bool| {
                let mut log_surv = 0.0;
                (1..=inst.tau - j)
                    .map(|k| {
                        let c = spec.cell_index(j, k, z);
                        log_surv += log1p(-sums.weighted_events[c] / sums.weight[c]);
                        -expm1(log_surv)
                    })
                    .collect::<Vec<f64>>()
            };
            [arm(false), arm(true)]
        })
        .collect()
}

/// A random instance over `levels` covariate values with propensities in
/// `(0.1, 0.9)`, censoring-free probabilities in `(0.7, 0.99)` and hazards
/// in `(0.01, 0.3)` that all depend on the covariate.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, levels: usize, num_trials: u32, tau: u32) -> TinyInstance {
    let nt = num_trials as usize;
    let mut p_x = Vec::with_capacity(nt);
    let mut e = Vec::with_capacity(nt);
    let mut d = Vec::with_capacity(nt);
    let mut h = Vec::with_capacity(nt);
    for j in 0..nt {
        let raw: Vec<f64> = (0..levels).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        p_x.push(raw.iter().map(|v| v / total).collect());
        e.push((0..levels).map(|_| rng.random_range(0.1..0.9)).collect());
        let weeks = tau as usize - j;
        let mut table = |lo: f64, hi: f64| -> [Vec<Vec<f64>>; 2] {
            let mut one = || (0..levels).map(|_| (0..weeks).map(|_| rng.random_range(lo..hi)).collect()).collect();
            [one(), one()]
        };
        d.push(table(0.7, 0.99));
        h.push(table(0.01, 0.3));
    }
    TinyInstance { num_trials, tau, p_x, e, d, h }
}

/// Largest absolute disagreement between the g-formula and the IPW plug-in
/// (and between the g-formula and brute force) over every `(j, k, z)`.
pub fn max_discrepancies(inst: &TinyInstance) -> Result<(f64, f64), OracleError> {
    inst.validate()?;
    let ipw = ipw_risks(inst);
    let (mut vs_ipw, mut vs_brute): (f64, f64) = (0.0, 0.0);
    for j in 0..inst.num_trials {
        for k in 1..=inst.tau - j {
            for z in [false, true] {
                let g = gformula_risk(inst, j, k, z);
                vs_ipw = vs_ipw.max((g - ipw[j as usize][usize::from(z)][k as usize - 1]).abs());
                vs_brute = vs_brute.max((g - brute_force_risk(inst, j, k, z)).abs());
            }
        }
    }
    Ok((vs_ipw, vs_brute))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn point_mass_without_confounding_is_plain_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let inst = random_instance(&mut rng, 1, 1, 4);
        let h = &inst.h[0][1][0];
        let expected = 1.0 - h.iter().take(3).map(|v| 1.0 - v).product::<f64>();
        assert!((gformula_risk(&inst, 0, 3, true) - expected).abs() < 1e-15);
    }

    #[test]
    fn three_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let inst = random_instance(&mut rng, 3, 3, 5);
            let (ipw, brute) = max_discrepancies(&inst).unwrap();
            assert!(ipw < 1e-12 && brute < 1e-12, "{ipw} {brute}");
        }
    }

    #[test]
    fn path_probabilities_sum_to_one_per_trial() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inst = random_instance(&mut rng, 2, 3, 4);
        let (panel, prob) = enumerate_paths(&inst);
        for j in 0..3 {
            let total: f64 = panel.rows.iter().zip(&prob).filter(|(r, _)| r.j == j && r.k == 0).map(|(_, p)| p).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unenumerable_instance_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut inst = random_instance(&mut rng, 2, 2, 4);
        inst.tau = 9;
        assert!(max_discrepancies(&inst).is_err());
    }
}
