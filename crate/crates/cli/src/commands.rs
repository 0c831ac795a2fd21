//! Subcommand implementations. Each one writes its artifacts into the output
//! directory and returns a short report for the terminal.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use vetrial_core::cohort::expand_trials;
use vetrial_core::msm::GridCell;
use vetrial_core::pipeline::analyze_panel;
use vetrial_core::sim::{
    calibrate, max_discrepancies, random_instance, run_replication, simulate_cohort, summarize, ReplicationConfig,
    SimScenario, SUMMARY_CELLS,
};

use crate::config::{
    parse_grid, resolve_analysis, resolve_protocol, resolve_simulation, TehAlternative, FileConfig, OracleSection, Overrides, ResolvedSimulation,
};
use crate::io::{load_cohort, teh_rejects, write_cohort, write_panel, write_surface, write_surface_long, write_teh};
use crate::manifest::{
    AnalyzeBody, CensoringRecord, Manifest, NuisanceRecord, OracleBody, OutcomeRecord, ReplicateBody, SandwichRecord,
    SimulateBody, TehRecord,
};

const DEFAULT_SEED: u64 = 1;
const DEFAULT_OUT_DIR: &str = "vetrial-out";

#[derive(Debug, Parser)]
#[command(name = "vetrial", version, about = "Vaccine effectiveness over calendar time and time since vaccination by nested trial emulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw one cohort from a simulation scenario.
    Simulate(CommonArgs),
    /// Fit the weight and outcome models to a cohort file.
    Analyze(AnalyzeArgs),
    /// Run a Monte Carlo study and write its summary table.
    Replicate(CommonArgs),
    /// Compare the weighted plug-in with the g-formula on enumerable instances.
    OracleCheck(CommonArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Cells to report, e.g. `j=0,3,6,9;k=1..34`.
    #[arg(long)]
    pub grid: Option<String>,
    /// eq3, eq4 or eq5.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub spline: Option<OnOff>,
    /// Cap weights at the P-th and (100-P)-th percentiles.
    #[arg(long, value_name = "P")]
    pub truncate_weights: Option<f64>,
    /// one-sided or two-sided.
    #[arg(long)]
    pub teh: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Also write the expanded, weighted panel.
    #[arg(long)]
    pub dump_panel: bool,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            grid: self.grid.clone(),
            model: self.model.clone(),
            spline: self.spline.map(|s| s == OnOff::On),
            truncate_weights: self.truncate_weights,
            teh: self.teh.clone(),
        }
    }

    fn load(&self) -> Result<(FileConfig, u64, PathBuf)> {
        let file = FileConfig::load(&self.config)?;
        let seed = self.seed.or(file.seed).unwrap_or(DEFAULT_SEED);
        let out = self
            .out_dir
            .clone()
            .or_else(|| file.out_dir.as_ref().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
        Ok((file, seed, out))
    }
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Analyze(a) => analyze(&a),
        Command::Replicate(a) => replicate(&a),
        Command::OracleCheck(a) => oracle_check(&a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?))
}

fn scenario_of(sim: &ResolvedSimulation) -> Result<SimScenario> {
    let scenario =
        SimScenario { n: sim.n, tau: sim.tau, num_trials: sim.trials, ..SimScenario::new(sim.scenario)? };
    scenario.validate()?;
    Ok(scenario)
}

fn replication_config(sim: &ResolvedSimulation, cells: Vec<GridCell>) -> Result<ReplicationConfig> {
    let mut rc = ReplicationConfig::new(scenario_of(sim)?, sim.reps, sim.seed, sim.plans()?);
    rc.cells = cells;
    rc.truncation = sim.truncate_weights;
    rc.gamma = sim.gamma;
    rc.calibration_n = sim.calibration_n;
    Ok(rc)
}

pub fn simulate(args: &CommonArgs) -> Result<String> {
    let (file, seed, out) = args.load()?;
    let sim = resolve_simulation(&file, &args.overrides(), seed)?;
    let rc = replication_config(&sim, Vec::new())?;
    let intercepts = calibrate(&rc)?;
    // Same stream as replicate 0 of a study with this seed.
    let cohort = simulate_cohort(&rc.scenario, &intercepts, &mut ChaCha8Rng::seed_from_u64(rc.rep_seed(0)));
    let names: Vec<String> = (1..=cohort.first().map_or(0, |r| r.x.len())).map(|i| format!("x{i}")).collect();
    let cohort_path = out.join("cohort.csv");
    write_cohort(create(&cohort_path)?, &cohort, &names)?;
    let body = SimulateBody { config: sim, intercepts, cohort_path: "cohort.csv".into(), persons: cohort.len() };
    Manifest::new("simulate", Some(seed), body).write(&out.join("manifest.json"))?;
    Ok(format!("wrote {} persons to {}", cohort.len(), cohort_path.display()))
}

pub fn analyze(args: &AnalyzeArgs) -> Result<String> {
    let (file, seed, out) = args.common.load()?;
    // Resolve everything that does not depend on the data before reading it.
    resolve_analysis(&file, &args.common.overrides(), None)?;
    let protocol = resolve_protocol(&file)?;
    let reader = File::open(&args.cohort).with_context(|| format!("cannot open {}", args.cohort.display()))?;
    let (cohort, covariates) =
        load_cohort(std::io::BufReader::new(reader), &protocol).with_context(|| format!("reading {}", args.cohort.display()))?;
    let resolved = resolve_analysis(&file, &args.common.overrides(), Some(&covariates))?;
    let config = resolved.analysis.clone().expect("resolved analysis carries its config");

    let mut panel = expand_trials(&cohort, &protocol)?;
    let result = analyze_panel(&mut panel, &config)?;
    let outcome = result.outcomes.into_iter().next().expect("one outcome model configured");

    write_surface(create(&out.join("surface.csv"))?, &outcome.surface)?;
    write_surface_long(create(&out.join("surface_long.csv"))?, &outcome.surface)?;
    let panel_path = if args.dump_panel {
        write_panel(create(&out.join("panel.csv"))?, &panel)?;
        Some("panel.csv".to_string())
    } else {
        None
    };
    let teh = match (outcome.teh, resolved.teh) {
        (Some(t), Some(alt)) => {
            write_teh(create(&out.join("teh.csv"))?, &t, alt, resolved.gamma)?;
            Some(TehRecord { alternative: alt, reject: teh_rejects(&t, alt, resolved.gamma), result: t, path: "teh.csv".into() })
        }
        _ => None,
    };
    let mut report = format!(
        "{} persons, {} panel rows, {} cells in surface.csv",
        result.persons,
        result.panel_rows,
        outcome.surface.cells.len()
    );
    if let Some(t) = &teh {
        report.push_str(&format!(
            "; homogeneity test u = {:.3}, p = {:.4} ({})",
            t.result.u_beta,
            match t.alternative {
                TehAlternative::OneSided => t.result.p_one_sided,
                TehAlternative::TwoSided => t.result.p_two_sided,
            },
            if t.reject { "rejected" } else { "not rejected" }
        ));
    }
    let nuisance = result.nuisance;
    let body = AnalyzeBody {
        cohort: args.cohort.display().to_string(),
        covariates,
        persons: result.persons,
        panel_rows: result.panel_rows,
        config: resolved,
        propensity: NuisanceRecord { spec: nuisance.spec_g, fit: nuisance.zeta },
        censoring: nuisance.spec_h.zip(nuisance.kappa).map(|(spec, fit)| CensoringRecord { spec, fit }),
        outcome: OutcomeRecord { spec: outcome.spec, fit: outcome.fit, theta: outcome.theta },
        layout: result.layout.clone(),
        weights: result.weights,
        sandwich: SandwichRecord {
            n: result.sandwich.n,
            dim: result.layout.dim,
            diagnostics: result.sandwich.diagnostics,
        },
        surface_path: "surface.csv".into(),
        surface_long_path: "surface_long.csv".into(),
        panel_path,
        teh,
    };
    Manifest::new("analyze", Some(seed), body).write(&out.join("manifest.json"))?;
    Ok(report)
}

pub fn replicate(args: &CommonArgs) -> Result<String> {
    let (file, seed, out) = args.load()?;
    let sim = resolve_simulation(&file, &args.overrides(), seed)?;
    let protocol = vetrial_core::cohort::ProtocolConfig::new(sim.trials, sim.tau)?;
    let cells = match &args.grid {
        Some(g) => parse_grid(g, &protocol)?.unwrap_or_else(|| all_cells(&protocol)),
        None => SUMMARY_CELLS.iter().copied().filter(|c| c.j <= protocol.max_trial() && c.k <= protocol.tau - c.j).collect(),
    };
    if cells.is_empty() {
        bail!("no summary cell lies inside {} trials with tau = {}; pass --grid", sim.trials, sim.tau);
    }
    let rc = replication_config(&sim, cells.clone())?;
    let intercepts = calibrate(&rc)?;
    let results: Vec<_> = (0..rc.reps).into_par_iter().map(|r| run_replication(&rc, &intercepts, r)).collect();
    let summary = summarize(&rc, &results);
    let table = summary.to_table();
    std::fs::write(out.join("summary.tsv"), &table)?;
    let failures = summary.plans.iter().map(|p| p.failures.len()).sum();
    let body = ReplicateBody { config: sim, cells, summary_path: "summary.tsv".into(), failures };
    Manifest::new("replicate", Some(seed), body).write(&out.join("manifest.json"))?;
    Ok(table)
}

fn all_cells(protocol: &vetrial_core::cohort::ProtocolConfig) -> Vec<GridCell> {
    (0..=protocol.max_trial()).flat_map(|j| (1..=protocol.tau - j).map(move |k| GridCell { j, k })).collect()
}

pub fn oracle_check(args: &CommonArgs) -> Result<String> {
    let (file, seed, out) = args.load()?;
    let cfg: OracleSection = file.oracle.clone().unwrap_or_default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = String::from("instance\tipw_gap\tbrute_force_gap\tpass\n");
    let (mut worst_ipw, mut worst_brute, mut passed) = (0.0f64, 0.0f64, 0usize);
    for i in 0..cfg.instances {
        let inst = random_instance(&mut rng, cfg.levels, cfg.trials, cfg.tau);
        let (ipw, brute) = max_discrepancies(&inst).with_context(|| format!("instance {i}"))?;
        let pass = ipw <= cfg.tolerance && brute <= cfg.tolerance;
        passed += usize::from(pass);
        worst_ipw = worst_ipw.max(ipw);
        worst_brute = worst_brute.max(brute);
        report.push_str(&format!("{i}\t{ipw:e}\t{brute:e}\t{}\n", if pass { "PASS" } else { "FAIL" }));
    }
    std::fs::write(out.join("oracle.tsv"), &report)?;
    let body = OracleBody {
        config: cfg.clone(),
        report_path: "oracle.tsv".into(),
        worst_ipw_gap: worst_ipw,
        worst_brute_force_gap: worst_brute,
        passed,
    };
    Manifest::new("oracle-check", Some(seed), body).write(&out.join("manifest.json"))?;
    let line = format!(
        "{passed} of {} instances within {:e} (worst gaps: weighted {worst_ipw:e}, enumeration {worst_brute:e})",
        cfg.instances, cfg.tolerance
    );
    if passed < cfg.instances {
        bail!("oracle check failed: {line}");
    }
    Ok(line)
}
