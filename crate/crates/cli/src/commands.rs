//! Subcommand implementations. Each returns its in-memory results so callers
//! (and tests) can inspect them; files are written as a side effect.

use std::path::Path;

use learn2help::data::{load_csv, sample_task, split};
use learn2help::evaluation::{
    confidence_baseline_curve, cost_sweep, evaluate, random_baseline_curve, write_curves_csv, ConfidenceVariant,
    RunSetup, SlopeReport, SweepRow,
};
use learn2help::models::Checkpoint;
use learn2help::oracle::{sign_consistency_grid, unit_grid, violations, write_grid_csv, GridRow};
use learn2help::rng::derive_seed;
use learn2help::training::{train_client, train_expert_alone, train_help, train_rejector_only, EpochLog};
use learn2help::{
    evaluation, Architecture, CostSpec64, CurvePoint64, Dataset64, EvalReport64, FixedClient64, HelpSystem64, Method,
    Scorer64,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::artifacts::Outputs;
use crate::config::{ExperimentConfig, TaskSpec};
use crate::error::{CliError, CliResult};

/// Indices under which per-purpose seeds are derived from the experiment seed.
pub mod seeds {
    pub const TRAIN_DATA: u64 = 0;
    pub const TEST_DATA: u64 = 1;
    pub const CLIENT_DATA: u64 = 2;
    pub const CLIENT: u64 = 3;
    pub const JOINT: u64 = 4;
    pub const EXPERT_ALONE: u64 = 5;
    pub const SWEEP: u64 = 6;
    pub const REJECTOR_ONLY: u64 = 7;
    pub const RANDOM: u64 = 8;
    pub const SLOPE: u64 = 9;
    pub const SPLIT: u64 = 10;
}

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const CLIENT_JSON: &str = "client.json";
pub const REJECTOR_JSON: &str = "rejector.json";
pub const EXPERT_JSON: &str = "expert.json";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const CURVES_CSV: &str = "curves.csv";
pub const GRID_CSV: &str = "verify_grid.csv";
pub const VIOLATIONS_CSV: &str = "verify_violations.csv";
pub const SLOPE_JSON: &str = "verify_slope.json";

fn seed_for(cfg: &ExperimentConfig, purpose: u64) -> u64 {
    derive_seed(cfg.seed, purpose)
}

#[derive(Debug, Clone)]
pub struct Data {
    pub train: Dataset64,
    pub test: Dataset64,
}

/// Draws the synthetic train/test sets in memory.
pub fn generate(cfg: &ExperimentConfig) -> CliResult<Data> {
    let TaskSpec::Synthetic { n_train, n_test, .. } = &cfg.task else {
        return Err(CliError::Usage("gen-data needs a synthetic task".into()));
    };
    let task = cfg.synthetic_task()?.expect("synthetic task");
    Ok(Data {
        train: sample_task(&task, *n_train, seed_for(cfg, seeds::TRAIN_DATA))?,
        test: sample_task(&task, *n_test, seed_for(cfg, seeds::TEST_DATA))?,
    })
}

fn require(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "missing data file {}; run `learn2help gen-data` first or point the config at existing CSVs",
            path.display()
        )))
    }
}

/// Loads the datasets the config refers to: the generated CSVs in the output
/// directory for a synthetic task, the given files otherwise.
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<Data> {
    let data = match &cfg.task {
        TaskSpec::Synthetic { .. } => {
            let (train, test) = (cfg.out_dir.join(TRAIN_CSV), cfg.out_dir.join(TEST_CSV));
            require(&train)?;
            require(&test)?;
            Data {
                train: load_csv(&train)?,
                test: load_csv(&test)?,
            }
        }
        TaskSpec::Csv {
            train,
            test,
            test_fraction,
        } => {
            require(train)?;
            let full = load_csv(train)?;
            match test {
                Some(test) => {
                    require(test)?;
                    Data {
                        train: full,
                        test: load_csv(test)?,
                    }
                }
                None => {
                    let (test, train) = split(&full, *test_fraction, seed_for(cfg, seeds::SPLIT))?;
                    Data { train, test }
                }
            }
        }
    };
    let k = cfg.architectures.client.input_dim();
    for (name, ds) in [("train", &data.train), ("test", &data.test)] {
        if ds.dim() != k {
            return Err(CliError::Usage(format!(
                "{name} data has {} features but the architectures expect {k}",
                ds.dim()
            )));
        }
    }
    Ok(data)
}

/// Pre-trains and freezes the client, on `client_task` if configured.
pub fn pretrain_client(cfg: &ExperimentConfig, data: &Data) -> CliResult<FixedClient64> {
    let sgd = cfg.training.client.with_seed(seed_for(cfg, seeds::CLIENT));
    let client = match &cfg.client_task {
        Some(ct) => {
            let task = learn2help::GaussianMixtureTask64::new(ct.params.clone())?;
            let ds = sample_task(&task, ct.n, seed_for(cfg, seeds::CLIENT_DATA))?;
            train_client(&ds, &cfg.architectures.client, &sgd)?
        }
        None => train_client(&data.train, &cfg.architectures.client, &sgd)?,
    };
    Ok(client)
}

fn setup(cfg: &ExperimentConfig, data: &Data, client: FixedClient64) -> RunSetup<f64> {
    RunSetup {
        train: data.train.clone(),
        test: data.test.clone(),
        client,
        rejector_arch: cfg.architectures.rejector.clone(),
        expert_arch: cfg.architectures.expert.clone(),
        calib: cfg.calibration,
        cfg: cfg.training.joint.with_seed(0),
    }
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> CliResult<Data> {
    let data = generate(cfg)?;
    let out = Outputs::new(cfg)?;
    for (name, ds) in [(TRAIN_CSV, &data.train), (TEST_CSV, &data.test)] {
        ds.write_csv(&out.path(name))?;
        out.write_meta(name, "gen-data")?;
    }
    Ok(data)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub system: HelpSystem64,
    pub log: Vec<EpochLog<f64>>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<TrainOutcome> {
    let data = load_data(cfg)?;
    let client = pretrain_client(cfg, &data)?;
    let joint_seed = seed_for(cfg, seeds::JOINT);
    let rejector = Scorer64::init(cfg.architectures.rejector.clone(), derive_seed(joint_seed, 0))?;
    let expert = Scorer64::init(cfg.architectures.expert.clone(), derive_seed(joint_seed, 1))?;
    let (system, log) = train_help(
        &data.train,
        &client,
        rejector,
        expert,
        &cfg.costs,
        &cfg.calibration,
        &cfg.training.joint.with_seed(joint_seed),
    )?;

    let out = Outputs::new(cfg)?;
    out.save_checkpoint(
        CLIENT_JSON,
        "client",
        system.client.scorer(),
        seed_for(cfg, seeds::CLIENT),
    )?;
    out.save_checkpoint(REJECTOR_JSON, "rejector", &system.rejector, derive_seed(joint_seed, 0))?;
    out.save_checkpoint(EXPERT_JSON, "expert", &system.expert, derive_seed(joint_seed, 1))?;
    let rows: Vec<Vec<String>> = log
        .iter()
        .map(|l| {
            vec![
                l.epoch.to_string(),
                l.mean_surrogate.to_string(),
                l.train_risk.to_string(),
                l.coverage.to_string(),
            ]
        })
        .collect();
    out.write_csv(
        TRAIN_LOG_CSV,
        "train",
        "epoch,mean_surrogate,train_risk,coverage",
        &rows,
    )?;
    Ok(TrainOutcome { system, log })
}

fn load_scorer(cfg: &ExperimentConfig, name: &str, expected: &Architecture) -> CliResult<Scorer64> {
    let path = cfg.out_dir.join(name);
    if !path.is_file() {
        return Err(CliError::Usage(format!(
            "missing checkpoint {}; run `learn2help train` first",
            path.display()
        )));
    }
    let ck: Checkpoint<f64> = Checkpoint::load(&path)?;
    if &ck.architecture != expected {
        return Err(CliError::Usage(format!(
            "checkpoint {} has architecture {:?} but the config specifies {:?}",
            path.display(),
            ck.architecture,
            expected
        )));
    }
    Ok(ck.to_scorer()?)
}

/// Reassembles the trained system from the checkpoints in the output directory.
pub fn load_system(cfg: &ExperimentConfig) -> CliResult<HelpSystem64> {
    let a = &cfg.architectures;
    let client = FixedClient64::freeze(load_scorer(cfg, CLIENT_JSON, &a.client)?);
    let rejector = load_scorer(cfg, REJECTOR_JSON, &a.rejector)?;
    let expert = load_scorer(cfg, EXPERT_JSON, &a.expert)?;
    Ok(HelpSystem64::new(client, rejector, expert, cfg.costs)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalOutcome {
    pub train: EvalReport64,
    pub test: EvalReport64,
    /// `expert_acc_on_deferred - client_acc_on_deferred` on the test split.
    pub deferred_gap: Option<f64>,
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> CliResult<EvalOutcome> {
    let data = load_data(cfg)?;
    let system = load_system(cfg)?;
    let train = evaluate(&system, &data.train)?;
    let test = evaluate(&system, &data.test)?;
    let outcome = EvalOutcome {
        train,
        test,
        deferred_gap: test.deferred_gap(),
    };
    let out = Outputs::new(cfg)?;
    out.write_json(REPORT_JSON, "eval", &outcome)?;
    let header = format!("split,{}", EvalReport64::CSV_HEADER);
    let rows: Vec<Vec<String>> = [("train", &train), ("test", &test)]
        .iter()
        .map(|(split, r)| std::iter::once(split.to_string()).chain(r.csv_fields()).collect())
        .collect();
    out.write_csv(REPORT_CSV, "eval", &header, &rows)?;
    Ok(outcome)
}

fn sweep_rows(cfg: &ExperimentConfig, data: &Data, client: &FixedClient64) -> CliResult<Vec<SweepRow<f64>>> {
    let setup = setup(cfg, data, client.clone());
    Ok(cost_sweep(
        &setup,
        &cfg.sweep.ce_values,
        cfg.costs.c1,
        seed_for(cfg, seeds::SWEEP),
    )?)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<Vec<SweepRow<f64>>> {
    let data = load_data(cfg)?;
    let client = pretrain_client(cfg, &data)?;
    let rows = sweep_rows(cfg, &data, &client)?;
    let out = Outputs::new(cfg)?;
    let header = format!("ce,seed,{}", EvalReport64::CSV_HEADER);
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            [r.ce.to_string(), r.seed.to_string()]
                .into_iter()
                .chain(r.report.csv_fields())
                .collect()
        })
        .collect();
    out.write_csv(SWEEP_CSV, "sweep", &header, &table)?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub curves: Vec<CurvePoint64>,
    pub client_accuracy: f64,
    pub expert_alone_accuracy: f64,
}

impl CompareOutcome {
    pub fn curve(&self, method: Method) -> Vec<CurvePoint64> {
        self.curves.iter().filter(|p| p.method == method).copied().collect()
    }
}

pub fn cmd_compare(cfg: &ExperimentConfig) -> CliResult<CompareOutcome> {
    let data = load_data(cfg)?;
    let client = pretrain_client(cfg, &data)?;
    let expert_alone = train_expert_alone(
        &data.train,
        &cfg.architectures.expert,
        &cfg.training.expert_alone.with_seed(seed_for(cfg, seeds::EXPERT_ALONE)),
    )?;

    let mut curves: Vec<CurvePoint64> = sweep_rows(cfg, &data, &client)?
        .iter()
        .map(|r| r.curve_point())
        .collect();

    let base = seed_for(cfg, seeds::REJECTOR_ONLY);
    let rejector_only: Vec<CurvePoint64> = cfg
        .sweep
        .ce_values
        .par_iter()
        .enumerate()
        .map(|(i, &ce)| {
            let seed = derive_seed(base, i as u64);
            let costs = CostSpec64::new(cfg.costs.c1, ce)?;
            let rejector = Scorer64::init(cfg.architectures.rejector.clone(), derive_seed(seed, 0))?;
            let (sys, _) = train_rejector_only(
                &data.train,
                &client,
                &expert_alone,
                rejector,
                &costs,
                &cfg.calibration,
                &cfg.training.joint.with_seed(seed),
            )?;
            let report = evaluate(&sys, &data.test)?;
            Ok(CurvePoint64 {
                method: Method::Learn2helpRejectorOnly,
                knob: ce,
                coverage: report.coverage,
                accuracy: report.accuracy,
            })
        })
        .collect::<learn2help::Result<_>>()?;
    curves.extend(rejector_only);

    let c = &cfg.compare;
    curves.extend(confidence_baseline_curve(
        &client,
        &expert_alone,
        &data.test,
        &c.sigmoid_thresholds,
        ConfidenceVariant::Sigmoid,
    )?);
    curves.extend(confidence_baseline_curve(
        &client,
        &expert_alone,
        &data.test,
        &c.distance_thresholds,
        ConfidenceVariant::Distance,
    )?);
    curves.extend(random_baseline_curve(
        &client,
        &expert_alone,
        &data.test,
        &c.random_rates,
        seed_for(cfg, seeds::RANDOM),
    )?);

    let out = Outputs::new(cfg)?;
    write_curves_csv(&curves, &out.path(CURVES_CSV))?;
    out.write_meta(CURVES_CSV, "compare")?;
    Ok(CompareOutcome {
        curves,
        client_accuracy: evaluation::accuracy(&client, &data.test)?,
        expert_alone_accuracy: evaluation::accuracy(&expert_alone, &data.test)?,
    })
}

#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub grid: Vec<GridRow<f64>>,
    pub violations: Vec<GridRow<f64>>,
    pub slope: Option<SlopeReport<f64>>,
    pub slope_range: (f64, f64),
}

impl VerifyOutcome {
    pub fn slope_ok(&self) -> bool {
        self.slope
            .as_ref()
            .is_none_or(|s| s.slope >= self.slope_range.0 && s.slope <= self.slope_range.1)
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.slope_ok()
    }

    /// Human-readable reason for a failure, `None` when everything passed.
    pub fn failure(&self) -> Option<String> {
        let mut reasons = Vec::new();
        if !self.violations.is_empty() {
            reasons.push(format!(
                "{} sign-consistency violations (see {VIOLATIONS_CSV})",
                self.violations.len()
            ));
        }
        if !self.slope_ok() {
            let s = self.slope.as_ref().map(|s| s.slope).unwrap_or(f64::NAN);
            reasons.push(format!(
                "risk-gap slope {s} outside [{}, {}]",
                self.slope_range.0, self.slope_range.1
            ));
        }
        (!reasons.is_empty()).then(|| reasons.join("; "))
    }
}

/// Sign-consistency grid over the configured costs.
pub fn verify_grid(cfg: &ExperimentConfig) -> CliResult<Vec<GridRow<f64>>> {
    let v = &cfg.verify;
    let axis: Vec<f64> = unit_grid(v.grid_divisions, false);
    Ok(sign_consistency_grid(&axis, &axis, &v.grid_costs, &cfg.calibration)?)
}

/// Risk-gap slope on the synthetic task; `None` for CSV tasks.
pub fn verify_slope(cfg: &ExperimentConfig) -> CliResult<Option<SlopeReport<f64>>> {
    let Some(task) = cfg.synthetic_task()? else {
        return Ok(None);
    };
    let v = &cfg.verify;
    let data = generate(cfg)?;
    let client = pretrain_client(cfg, &data)?;
    let report = learn2help::evaluation::risk_gap_slope(
        &task,
        &setup(cfg, &data, client),
        &cfg.costs,
        &v.slope_n_values,
        v.slope_repeats,
        v.slope_holdout,
        seed_for(cfg, seeds::SLOPE),
    )?;
    Ok(Some(report))
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> CliResult<VerifyOutcome> {
    let grid = verify_grid(cfg)?;
    let bad = violations(&grid);
    let out = Outputs::new(cfg)?;
    write_grid_csv(&grid, &out.path(GRID_CSV))?;
    out.write_meta(GRID_CSV, "verify")?;
    write_grid_csv(&bad, &out.path(VIOLATIONS_CSV))?;
    out.write_meta(VIOLATIONS_CSV, "verify")?;

    let slope = if cfg.verify.skip_slope {
        None
    } else {
        verify_slope(cfg)?
    };
    if let Some(report) = &slope {
        out.write_json(SLOPE_JSON, "verify", report)?;
    }
    Ok(VerifyOutcome {
        grid,
        violations: bad,
        slope,
        slope_range: (cfg.verify.slope_min, cfg.verify.slope_max),
    })
}
