//! Experiment configuration, read from TOML.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use influence_core::hessian::Scope;
use influence_core::loo::{Family, InfluenceSettings, ModelSpec, Retrain, Selection, TestPoint};
use influence_core::mlp::{Activation, ArchSpec};
use influence_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Parent directory of the `run-NNN` directories.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_arms")]
    pub arms: Vec<Arm>,
    /// Training settings shared by all arms. `weight_decay` is the strength
    /// used by the weight-decay arms.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    #[serde(default)]
    pub influence: InfluenceSettings,
    #[serde(default)]
    pub eigen: EigenConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_repetitions() -> usize {
    1
}

fn default_arms() -> Vec<Arm> {
    vec![Arm::WeightDecay]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Iris CSV with a string species column.
    Iris {
        path: PathBuf,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
        #[serde(default = "yes")]
        standardize: bool,
    },
    /// Numeric CSV whose last column is an integer label.
    Csv {
        path: PathBuf,
        #[serde(default)]
        n_features: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
        #[serde(default = "yes")]
        standardize: bool,
    },
    /// Directory holding the four MNIST IDX files.
    Mnist {
        dir: PathBuf,
        #[serde(default = "default_mnist_train")]
        train_limit: usize,
        #[serde(default = "default_mnist_test")]
        test_limit: usize,
    },
    Blobs {
        n: usize,
        features: usize,
        classes: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic quadratic loss with the given Hessian spectrum, rotated by
    /// a random reflection. Only supported by `eigen`.
    Quadratic { eigenvalues: Vec<f64> },
}

fn default_test_fraction() -> f64 {
    0.2
}

fn yes() -> bool {
    true
}

fn default_mnist_train() -> usize {
    5000
}

fn default_mnist_test() -> usize {
    1000
}

fn default_spread() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub depths: Vec<usize>,
    pub activation: Activation,
    /// Initial log-variance for the variational arm.
    pub init_logvar: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: vec![5, 10, 20, 40],
            depths: vec![1],
            activation: Activation::Relu,
            init_logvar: influence_core::bnn::DEFAULT_INIT_LOGVAR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    None,
    WeightDecay,
    Swa,
    WeightDecaySwa,
    Bnn,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::None => "none",
            Arm::WeightDecay => "weight_decay",
            Arm::Swa => "swa",
            Arm::WeightDecaySwa => "weight_decay_swa",
            Arm::Bnn => "bnn",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        [Arm::None, Arm::WeightDecay, Arm::Swa, Arm::WeightDecaySwa, Arm::Bnn]
            .into_iter()
            .find(|a| a.name() == s)
    }

    pub fn family(self) -> Family {
        match self {
            Arm::Bnn => Family::Bnn,
            _ => Family::Mlp,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub selection: Selection,
    pub retrain: Retrain,
    pub test_point: TestPoint,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            selection: Selection::TopLoss(40),
            retrain: Retrain::FromOptimal {
                finetune_epochs: 7500,
                lr: None,
            },
            test_point: TestPoint::MaxLoss,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub scope: Scope,
}

impl Default for EigenConfig {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tol: 1e-6,
            scope: Scope::AllParams,
        }
    }
}

/// One point of the sweep: a regularization arm and an architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub arm: Arm,
    pub depth: usize,
    pub width: usize,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("{}-d{}-w{}", self.arm, self.depth, self.width)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`. Relative dataset paths are resolved
    /// against the directory containing the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration is always representable in TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetSpec::Iris { path, .. } | DatasetSpec::Csv { path, .. } => fix(path),
            DatasetSpec::Mnist { dir, .. } => fix(dir),
            DatasetSpec::Blobs { .. } | DatasetSpec::Quadratic { .. } => {}
        }
    }

    /// Field-level validation; all problems are reported at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut errs = Vec::new();
        if self.repetitions == 0 {
            errs.push("repetitions: must be at least 1".to_string());
        }
        if self.arms.is_empty() {
            errs.push("arms: at least one arm is required".into());
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            errs.push("model.widths: must be a non-empty list of positive widths".into());
        }
        if self.model.depths.is_empty() {
            errs.push("model.depths: must be non-empty".into());
        }
        if !self.model.init_logvar.is_finite() {
            errs.push("model.init_logvar: must be finite".into());
        }
        if let Err(e) = self.train.validate() {
            errs.push(format!("train: {e}"));
        }
        if !(self.influence.damping >= 0.0 && self.influence.damping.is_finite()) {
            errs.push("influence.damping: must be finite and non-negative".into());
        }
        if self.protocol.selection.k() == 0 {
            errs.push("protocol.selection.k: must be at least 1".into());
        }
        if self.eigen.max_iters == 0 || !(self.eigen.tol > 0.0) {
            errs.push("eigen: max_iters and tol must be positive".into());
        }
        match &self.dataset {
            DatasetSpec::Iris { test_fraction, .. } | DatasetSpec::Csv { test_fraction, .. } | DatasetSpec::Blobs { test_fraction, .. }
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) =>
            {
                errs.push("dataset.test_fraction: must lie strictly between 0 and 1".into())
            }
            DatasetSpec::Mnist { train_limit, test_limit, .. } if *train_limit == 0 || *test_limit == 0 => {
                errs.push("dataset: train_limit and test_limit must be positive".into())
            }
            DatasetSpec::Quadratic { eigenvalues } if eigenvalues.is_empty() || eigenvalues.iter().any(|v| !v.is_finite()) => {
                errs.push("dataset.eigenvalues: must be a non-empty list of finite values".into())
            }
            _ => {}
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(errs.join("; ")))
        }
    }

    /// Sweep cells in a fixed order: arm, then depth, then width. A depth-0
    /// model has no hidden layer, so only the first width is kept for it.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &arm in &self.arms {
            for &depth in &self.model.depths {
                let widths = if depth == 0 { &self.model.widths[..1] } else { &self.model.widths[..] };
                for &width in widths {
                    out.push(Cell { arm, depth, width });
                }
            }
        }
        out
    }

    pub fn seed(&self, repetition: usize) -> u64 {
        self.base_seed.wrapping_add(repetition as u64)
    }

    pub fn model_spec(&self, cell: Cell, n_in: usize, n_out: usize) -> ModelSpec {
        ModelSpec {
            family: cell.arm.family(),
            arch: ArchSpec::new(n_in, cell.depth, cell.width, n_out).with_activation(self.model.activation),
            init_logvar: self.model.init_logvar,
        }
    }

    /// Training settings of `cell`'s arm.
    pub fn train_config(&self, cell: Cell, seed: u64) -> TrainConfig {
        let (wd, swa) = match cell.arm {
            Arm::None => (0.0, false),
            Arm::WeightDecay => (self.train.weight_decay, false),
            Arm::Swa => (0.0, true),
            Arm::WeightDecaySwa => (self.train.weight_decay, true),
            Arm::Bnn => (0.0, false),
        };
        TrainConfig {
            weight_decay: wd,
            swa,
            seed,
            ..self.train.clone()
        }
    }

    pub fn regularization(&self, cell: Cell) -> String {
        match cell.arm {
            Arm::WeightDecay | Arm::WeightDecaySwa => format!("{} (wd={})", cell.arm, self.train.weight_decay),
            _ => cell.arm.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IRIS: &str = r#"
name = "iris"
repetitions = 3
arms = ["weight_decay", "bnn"]

[dataset]
kind = "iris"
path = "data/iris.csv"

[model]
widths = [5, 10]
depths = [0, 1]

[train]
epochs = 100
batch_mode = { mode = "minibatch", size = 16 }

[protocol]
selection = { kind = "top_loss", k = 40 }
retrain = { kind = "from_optimal", finetune_epochs = 50 }

[influence]
damping = 0.01
method = { kind = "lissa", recursion_depth = 100 }
"#;

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::parse(IRIS).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.cells().len(), 2 * (1 + 2));
    }

    #[test]
    fn field_errors_are_named() {
        let bad = IRIS.replace("repetitions = 3", "repetitions = 0").replace("widths = [5, 10]", "widths = []");
        let CliError::Config(msg) = ExperimentConfig::parse(&bad).unwrap_err() else {
            panic!("expected config error")
        };
        assert!(msg.contains("repetitions") && msg.contains("model.widths"), "{msg}");
        assert!(ExperimentConfig::parse(&IRIS.replace("epochs = 100", "epochz = 100")).is_err());
    }

    #[test]
    fn arms_set_regularization() {
        let cfg = ExperimentConfig::parse(IRIS).unwrap();
        let c = Cell { arm: Arm::Swa, depth: 1, width: 5 };
        let t = cfg.train_config(c, 7);
        assert!(t.swa && t.weight_decay == 0.0 && t.seed == 7);
        assert_eq!(cfg.model_spec(Cell { arm: Arm::Bnn, ..c }, 4, 3).family, Family::Bnn);
        assert_eq!(Arm::parse("weight_decay_swa"), Some(Arm::WeightDecaySwa));
    }
}
