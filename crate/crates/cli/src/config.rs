//! Experiment configuration: one JSON file per experiment, every field optional
//! and defaulted, unknown keys rejected.

use std::path::{Path, PathBuf};

use learn2help::data::GaussianMixtureParams;
use learn2help::models::SgdConfig;
use learn2help::{Activation, Architecture, CalibrationSpec64, CostSpec64, GaussianMixtureTask64};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    /// Task the frozen client is pre-trained on. `None` pre-trains it on the
    /// training split of `task`.
    pub client_task: Option<ClientTaskSpec>,
    pub architectures: Architectures,
    pub costs: CostSpec64,
    pub calibration: CalibrationSpec64,
    pub training: TrainingSpec,
    pub sweep: SweepSpec,
    pub compare: CompareSpec,
    pub verify: VerifySpec,
    pub out_dir: PathBuf,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskSpec {
    Synthetic {
        params: GaussianMixtureParams<f64>,
        n_train: usize,
        n_test: usize,
    },
    /// Externally supplied CSVs. Without `test`, `train` is split by `test_fraction`.
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default = "half")]
        test_fraction: f64,
    },
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientTaskSpec {
    pub params: GaussianMixtureParams<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architectures {
    pub client: Architecture,
    pub rejector: Architecture,
    pub expert: Architecture,
}

/// SGD settings without a seed; seeds are derived from the experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
}

fn one() -> usize {
    1
}

impl SgdSpec {
    pub fn with_seed(&self, seed: u64) -> SgdConfig<f64> {
        SgdConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    /// Client pre-training (one short pass keeps it weak).
    pub client: SgdSpec,
    /// Joint rejector/expert training and the rejector-only arm.
    pub joint: SgdSpec,
    /// Separately trained expert used by the baselines.
    pub expert_alone: SgdSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ce_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSpec {
    pub sigmoid_thresholds: Vec<f64>,
    pub distance_thresholds: Vec<f64>,
    pub random_rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySpec {
    /// The eta and q axes are `{1/d, ..., (d-1)/d}`.
    pub grid_divisions: usize,
    pub grid_costs: Vec<CostSpec64>,
    pub slope_n_values: Vec<usize>,
    pub slope_repeats: usize,
    pub slope_holdout: usize,
    pub slope_min: f64,
    pub slope_max: f64,
    /// Skips the (slow) risk-gap slope part of `verify`.
    pub skip_slope: bool,
}

fn unit_cov() -> Vec<Vec<f64>> {
    vec![vec![1.0, 0.0], vec![0.0, 1.0]]
}

/// Class means `(+-cos a, +-sin a)`: the default task turned by `a` radians.
pub fn rotated_task(angle_deg: f64) -> GaussianMixtureParams<f64> {
    let a = angle_deg.to_radians();
    GaussianMixtureParams {
        prior_pos: 0.5,
        mean_pos: vec![a.cos(), a.sin()],
        mean_neg: vec![-a.cos(), -a.sin()],
        cov_pos: unit_cov(),
        cov_neg: unit_cov(),
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::Synthetic {
            params: rotated_task(0.0),
            n_train: 5000,
            n_test: 5000,
        }
    }
}

impl Default for Architectures {
    fn default() -> Self {
        Self {
            client: Architecture::mlp(&[2, 16, 16, 1], Activation::Identity),
            rejector: Architecture::mlp(&[2, 32, 1], Activation::Relu),
            expert: Architecture::mlp(&[2, 64, 64, 1], Activation::Relu),
        }
    }
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            client: SgdSpec {
                learning_rate: 0.01,
                epochs: 1,
                batch_size: 1,
            },
            joint: SgdSpec {
                learning_rate: 0.001,
                epochs: 10,
                batch_size: 1,
            },
            expert_alone: SgdSpec {
                learning_rate: 0.01,
                epochs: 10,
                batch_size: 1,
            },
        }
    }
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ce_values: vec![0.0, 0.1, 0.2, 0.4, 0.8],
        }
    }
}

impl Default for CompareSpec {
    fn default() -> Self {
        Self {
            sigmoid_thresholds: (0..=50).map(|i| i as f64 / 100.0).collect(),
            distance_thresholds: (0..=50).map(|i| i as f64 / 200.0).collect(),
            random_rates: (0..=20).map(|i| i as f64 / 20.0).collect(),
        }
    }
}

impl Default for VerifySpec {
    fn default() -> Self {
        let c = |c1, ce| CostSpec64 { c1, ce };
        Self {
            grid_divisions: 100,
            grid_costs: vec![c(1.0, 0.0), c(1.0, 0.1), c(1.0, 0.3), c(0.5, 0.1)],
            slope_n_values: vec![500, 2000, 8000],
            slope_repeats: 5,
            slope_holdout: 200_000,
            slope_min: -0.7,
            slope_max: -0.3,
            skip_slope: false,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            client_task: Some(ClientTaskSpec {
                params: rotated_task(45.0),
                n: 5000,
            }),
            architectures: Architectures::default(),
            costs: CostSpec64 { c1: 1.0, ce: 0.05 },
            calibration: CalibrationSpec64 {
                alpha1: 0.5,
                alpha2: 2.0,
            },
            training: TrainingSpec::default(),
            sweep: SweepSpec::default(),
            compare: CompareSpec::default(),
            verify: VerifySpec::default(),
            out_dir: PathBuf::from("out"),
            seed: 1,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn prefixed(prefix: &str, e: learn2help::Error) -> CliError {
    match e {
        learn2help::Error::Config { field, reason } => invalid(&format!("{prefix}.{field}"), reason),
        other => CliError::Core(other),
    }
}

fn check_sgd(name: &str, s: &SgdSpec) -> CliResult<()> {
    s.with_seed(0).validate().map_err(|e| prefixed(name, e))
}

fn check_sorted(name: &str, v: &[f64], lo: f64, hi: f64) -> CliResult<()> {
    if v.is_empty() {
        return Err(invalid(name, "must be nonempty"));
    }
    if v.iter().any(|x| !(*x >= lo && *x <= hi)) {
        return Err(invalid(name, format!("values must lie in [{lo}, {hi}]")));
    }
    if v.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid(name, "must be sorted ascending"));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| learn2help::Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let dim = match &self.task {
            TaskSpec::Synthetic {
                params,
                n_train,
                n_test,
            } => {
                let task = GaussianMixtureTask64::new(params.clone()).map_err(|e| prefixed("task.params", e))?;
                if *n_train == 0 {
                    return Err(invalid("task.n_train", "must be at least 1"));
                }
                if *n_test == 0 {
                    return Err(invalid("task.n_test", "must be at least 1"));
                }
                Some(task.dim())
            }
            TaskSpec::Csv {
                test, test_fraction, ..
            } => {
                if test.is_none() && !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(invalid("task.test_fraction", "must lie strictly inside (0, 1)"));
                }
                None
            }
        };
        if let Some(ct) = &self.client_task {
            let task = GaussianMixtureTask64::new(ct.params.clone()).map_err(|e| prefixed("client_task.params", e))?;
            if ct.n == 0 {
                return Err(invalid("client_task.n", "must be at least 1"));
            }
            if dim.is_some_and(|d| d != task.dim()) {
                return Err(invalid("client_task.params", "dimension differs from task"));
            }
        }
        let archs = [
            ("architectures.client", &self.architectures.client),
            ("architectures.rejector", &self.architectures.rejector),
            ("architectures.expert", &self.architectures.expert),
        ];
        for (name, arch) in archs {
            arch.validate().map_err(|e| invalid(name, e.to_string()))?;
            if dim.is_some_and(|d| d != arch.input_dim()) {
                return Err(invalid(
                    name,
                    format!("input width must equal the task dimension {}", dim.unwrap_or(0)),
                ));
            }
        }
        let (c, r) = (
            self.architectures.client.input_dim(),
            self.architectures.rejector.input_dim(),
        );
        if c != r || c != self.architectures.expert.input_dim() {
            return Err(invalid(
                "architectures",
                "client, rejector and expert must share an input width",
            ));
        }
        self.costs.validate()?;
        self.calibration.validate()?;
        check_sgd("training.client", &self.training.client)?;
        check_sgd("training.joint", &self.training.joint)?;
        check_sgd("training.expert_alone", &self.training.expert_alone)?;
        if self.sweep.ce_values.is_empty() {
            return Err(invalid("sweep.ce_values", "must be nonempty"));
        }
        for (i, &ce) in self.sweep.ce_values.iter().enumerate() {
            CostSpec64 { c1: self.costs.c1, ce }
                .validate()
                .map_err(|_| invalid(&format!("sweep.ce_values[{i}]"), "must be nonnegative and finite"))?;
        }
        check_sorted("compare.sigmoid_thresholds", &self.compare.sigmoid_thresholds, 0.0, 0.5)?;
        check_sorted(
            "compare.distance_thresholds",
            &self.compare.distance_thresholds,
            0.0,
            0.25,
        )?;
        check_sorted("compare.random_rates", &self.compare.random_rates, 0.0, 1.0)?;
        let v = &self.verify;
        if v.grid_divisions < 2 {
            return Err(invalid("verify.grid_divisions", "must be at least 2"));
        }
        if v.grid_costs.is_empty() {
            return Err(invalid("verify.grid_costs", "must be nonempty"));
        }
        for (i, c) in v.grid_costs.iter().enumerate() {
            c.validate()
                .map_err(|e| prefixed(&format!("verify.grid_costs[{i}]"), e))?;
        }
        if v.slope_n_values.len() < 3 || v.slope_n_values.windows(2).any(|w| w[0] >= w[1]) || v.slope_n_values[0] == 0 {
            return Err(invalid(
                "verify.slope_n_values",
                "need at least 3 strictly increasing positive sizes",
            ));
        }
        if v.slope_repeats < 3 {
            return Err(invalid("verify.slope_repeats", "must be at least 3"));
        }
        if v.slope_holdout == 0 {
            return Err(invalid("verify.slope_holdout", "must be at least 1"));
        }
        if v.slope_min.is_nan() || v.slope_max.is_nan() || v.slope_min >= v.slope_max {
            return Err(invalid("verify.slope_max", "must exceed verify.slope_min"));
        }
        Ok(())
    }

    /// Parsed synthetic task, if the config describes one.
    pub fn synthetic_task(&self) -> CliResult<Option<GaussianMixtureTask64>> {
        match &self.task {
            TaskSpec::Synthetic { params, .. } => Ok(Some(GaussianMixtureTask64::new(params.clone())?)),
            TaskSpec::Csv { .. } => Ok(None),
        }
    }

    /// Hex SHA-256 of the canonical JSON form of the config. The output
    /// directory is left out: it says where results go, not what they are.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let identity = Self {
            out_dir: PathBuf::new(),
            ..self.clone()
        };
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}
