use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vetrial_core::cohort::{expand_trials, DoseWeek, ProtocolConfig};
use vetrial_core::pipeline::{analyze_panel, resolve_propensity};
use vetrial_core::sim::oracle::{max_discrepancies, random_instance};
use vetrial_core::sim::{
    balancing_intercepts, gen_covariates, simulate_cohort, AnalysisPlan, ReplicationConfig, SimScenario, SUMMARY_CELLS,
};
use vetrial_core::msm::MsmFamily;
use vetrial_core::sim::correctly_specified_config;
use vetrial_core::weights::{fit_propensity, propensity_by_row};

/// Published true values for the summary cells, scenario by scenario.
const TABLE_ONE: [[f64; 10]; 3] = [
    [90.3, 90.3, 90.3, 90.3, 90.3, 91.4, 90.7, 88.9, 85.8, 81.9],
    [90.2, 87.9, 83.3, 74.3, 56.1, 88.4, 86.1, 81.6, 74.1, 65.2],
    [89.0, 86.3, 81.1, 70.9, 50.2, 88.1, 84.8, 76.3, 56.4, 21.5],
];

#[test]
fn true_ve_matches_published_table() {
    for (s, row) in TABLE_ONE.iter().enumerate() {
        let scenario = SimScenario::new(s as u8 + 1).unwrap();
        for (cell, &published) in SUMMARY_CELLS.iter().zip(row) {
            let ve = 100.0 * scenario.true_ve(cell.j, cell.k);
            assert!((ve - published).abs() <= 0.05, "scenario {} {:?}: {ve}", s + 1, cell);
        }
    }
}

#[test]
fn gformula_equals_weighted_plug_in_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..50 {
        let inst = random_instance(&mut rng, 2, 3, 4);
        let (ipw, brute) = max_discrepancies(&inst).unwrap();
        assert!(ipw < 1e-10 && brute < 1e-10, "{ipw} {brute}");
    }
}

#[test]
fn equal_seeds_give_identical_cohorts() {
    let scenario = SimScenario { n: 2_000, ..SimScenario::new(2).unwrap() };
    let sample = gen_covariates(10_000, &mut ChaCha8Rng::seed_from_u64(1));
    let iota = balancing_intercepts(&scenario, &sample).unwrap();
    let a = simulate_cohort(&scenario, &iota, &mut ChaCha8Rng::seed_from_u64(77));
    let b = simulate_cohort(&scenario, &iota, &mut ChaCha8Rng::seed_from_u64(77));
    let c = simulate_cohort(&scenario, &iota, &mut ChaCha8Rng::seed_from_u64(78));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn weekly_uptake_peaks_mid_campaign() {
    let scenario = SimScenario { n: 200_000, ..SimScenario::new(1).unwrap() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = gen_covariates(scenario.n, &mut rng);
    let mut at_risk = vec![0usize; 21];
    let mut doses = vec![0usize; 21];
    for x in &xs {
        let v = vetrial_core::sim::gen_uptake(&scenario, x, &mut rng);
        let last = match v {
            DoseWeek::Week(v) => v - 1,
            DoseWeek::Never => 20,
        };
        for j in 0..=last.min(20) {
            at_risk[j as usize] += 1;
        }
        if let DoseWeek::Week(v) = v {
            doses[v as usize - 1] += 1;
        }
    }
    let hazard: Vec<f64> = (0..21).map(|j| doses[j] as f64 / at_risk[j] as f64).collect();
    let peak = (0..21).max_by(|&a, &b| hazard[a].total_cmp(&hazard[b])).unwrap();
    assert!(peak == 5 || peak == 6, "{hazard:?}");
}

/// Empirical weekly hazards by stream, pooled the way they were generated:
/// the unvaccinated stream by calendar week and the vaccinated stream by
/// dose week and weeks since dose.
#[test]
fn generated_hazards_match_calibration_targets() {
    let scenario = SimScenario { n: 200_000, ..SimScenario::new(3).unwrap() };
    let tau = scenario.tau as usize;
    let sample = gen_covariates(100_000, &mut ChaCha8Rng::seed_from_u64(8));
    let iota = balancing_intercepts(&scenario, &sample).unwrap();
    let cohort = simulate_cohort(&scenario, &iota, &mut ChaCha8Rng::seed_from_u64(9));
    // [m] for z = 0; [j][k] for z = 1.
    let mut un = vec![(0usize, 0usize); tau + 1];
    let mut vac = vec![vec![(0usize, 0usize); tau + 1]; tau];
    for rec in &cohort {
        let end = if rec.delta { rec.t_star } else { scenario.tau };
        for m in 1..=end {
            let slot = match rec.v1() {
                DoseWeek::Week(v) if v <= m => &mut vac[v as usize - 1][(m - v + 1) as usize],
                _ => &mut un[m as usize],
            };
            slot.0 += 1;
            if rec.delta && m == rec.t_star {
                slot.1 += 1;
            }
        }
    }
    let mut checked = 0;
    let mut outside = Vec::new();
    let mut check = |label: String, (n, e): (usize, usize), target: f64| {
        if n < 500 {
            return;
        }
        checked += 1;
        let se = (target * (1.0 - target) / n as f64).sqrt();
        let z = (e as f64 / n as f64 - target) / se;
        if z.abs() > 3.0 {
            outside.push((label, z));
        }
    };
    for m in 1..=tau {
        check(format!("z=0 m={m}"), un[m], scenario.lambda(0, m as u32, false));
    }
    for j in 0..tau {
        for k in 1..=tau - j {
            check(format!("z=1 j={j} k={k}"), vac[j][k], scenario.lambda(j as u32, k as u32, true));
        }
    }
    assert!(checked > 100);
    // At 3 SEs about one cell in 370 falls outside by chance.
    assert!(outside.len() <= 3, "{outside:?}");
}

#[test]
fn weighting_balances_age_across_arms() {
    let scenario = SimScenario { n: 20_000, ..SimScenario::new(1).unwrap() };
    let sample = gen_covariates(100_000, &mut ChaCha8Rng::seed_from_u64(12));
    let iota = balancing_intercepts(&scenario, &sample).unwrap();
    let cohort = simulate_cohort(&scenario, &iota, &mut ChaCha8Rng::seed_from_u64(13));
    let protocol = ProtocolConfig::new(13, 20).unwrap();
    let panel = expand_trials(&cohort, &protocol).unwrap();
    let plan = [AnalysisPlan { family: MsmFamily::CalendarAndTsv, spline: false, teh: false }];
    let config = correctly_specified_config(&plan, false, &SUMMARY_CELLS, None, 0.05);
    let spec = resolve_propensity(&panel, &config.propensity).unwrap();
    let zeta = fit_propensity(&panel, &spec).unwrap();
    let e = propensity_by_row(&panel, &spec, &zeta.coef);
    let sd = {
        let ages: Vec<f64> = cohort.iter().map(|r| r.x[0]).collect();
        let mean = ages.iter().sum::<f64>() / ages.len() as f64;
        (ages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / ages.len() as f64).sqrt()
    };
    let (mut raw_worst, mut weighted_worst): (f64, f64) = (0.0, 0.0);
    for j in 0..13 {
        // [arm] -> (sum w, sum w x, count, sum x)
        let mut acc = [[0.0f64; 4]; 2];
        let mut enrolled = 0.0;
        let mut total_weight = 0.0;
        for (i, r) in panel.rows.iter().enumerate().filter(|(_, r)| r.k == 0 && r.j == j) {
            let x = panel.x(r.person)[0];
            let w = if r.z { 1.0 / e[i] } else { 1.0 / (1.0 - e[i]) };
            let a = &mut acc[usize::from(r.z)];
            a[0] += w;
            a[1] += w * x;
            a[2] += 1.0;
            a[3] += x;
            enrolled += 1.0;
            total_weight += w;
        }
        raw_worst = raw_worst.max((acc[1][3] / acc[1][2] - acc[0][3] / acc[0][2]).abs() / sd);
        weighted_worst = weighted_worst.max((acc[1][1] / acc[1][0] - acc[0][1] / acc[0][0]).abs() / sd);
        let ratio = total_weight / (2.0 * enrolled);
        assert!((ratio - 1.0).abs() < 0.1, "trial {j}: weighted size ratio {ratio}");
    }
    assert!(raw_worst > 0.1, "{raw_worst}");
    assert!(weighted_worst < 0.1, "{weighted_worst}");
}

#[test]
fn scenario_one_analysis_is_near_truth() {
    let scenario = SimScenario { n: 20_000, ..SimScenario::new(1).unwrap() };
    let plan = AnalysisPlan { family: MsmFamily::CalendarAndTsv, spline: false, teh: true };
    let rc = ReplicationConfig::new(scenario.clone(), 1, 3, vec![plan]);
    let sample = gen_covariates(100_000, &mut ChaCha8Rng::seed_from_u64(!3));
    let iota = balancing_intercepts(&scenario, &sample).unwrap();
    let cohort = simulate_cohort(&scenario, &iota, &mut ChaCha8Rng::seed_from_u64(3));
    let mut panel = expand_trials(&cohort, &rc.protocol()).unwrap();
    let config = correctly_specified_config(&[plan], false, &SUMMARY_CELLS, None, 0.05);
    let result = analyze_panel(&mut panel, &config).unwrap();
    let out = &result.outcomes[0];
    for cell in &out.surface.cells {
        let truth = scenario.true_log_rr(cell.j, cell.k);
        let se = cell.se_log_rr.unwrap();
        assert!((cell.log_rr - truth).abs() < 4.0 * se, "{cell:?} truth {truth}");
        let (lo, hi) = cell.ci.unwrap();
        assert!(lo < cell.ve && cell.ve < hi);
    }
    let teh = out.teh.as_ref().unwrap();
    assert!(teh.p_one_sided > 0.0 && teh.p_one_sided < 1.0);
}
