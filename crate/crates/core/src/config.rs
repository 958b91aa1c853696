//! Run configuration: one flat key-value file per experiment.
//!
//! Keys are dotted by section, e.g.
//!
//! ```text
//! run.method = "ours"
//! run.seeds = [0, 1, 2]
//! search.eta_alpha = 0.05
//! synthetic.target_n = 300
//! ```
//!
//! The file is parsed as TOML, for which dotted keys are native syntax.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blo::SearchConfig;
use crate::error::{Error, Result};
use crate::graph::Activation;
use crate::metrics::Metric;
use crate::model::TaskKind;
use crate::synthetic::SyntheticTaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Ours,
    Vanilla,
    Joint,
    RandomAlpha,
    ModelSoup,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::Vanilla => "vanilla",
            Method::Joint => "joint",
            Method::RandomAlpha => "random_alpha",
            Method::ModelSoup => "model_soup",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskSource {
    #[default]
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub source: TaskSource,
    pub name: String,
    /// For CSV tasks: "classification" or "regression".
    pub kind: String,
    pub classes: usize,
    pub source_csv: Option<PathBuf>,
    pub target_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            source: TaskSource::Synthetic,
            name: "synthetic".into(),
            kind: "classification".into(),
            classes: 2,
            source_csv: None,
            target_csv: None,
            test_csv: None,
        }
    }
}

impl TaskSection {
    pub fn task_kind(&self) -> Result<TaskKind> {
        match self.kind.as_str() {
            "classification" if self.classes >= 2 => Ok(TaskKind::Classification { classes: self.classes }),
            "classification" => Err(Error::Config("classification needs task.classes >= 2".into())),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Config(format!("unknown task.kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Low-resource training size drawn per seed; all target rows when unset.
    pub train_size: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { train_size: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub pretrained: PathBuf,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![32, 32],
            activation: Activation::Tanh,
            pretrained: PathBuf::from("pretrained.bin"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 5,
            lr: 3e-3,
            batch_size: 64,
            warmup_ratio: 0.05,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Finetune grid; every combination of `epochs × lr` is a candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub epochs: Vec<usize>,
    pub lr: Vec<f64>,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: vec![1, 3],
            lr: vec![2e-5, 3e-6],
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            batch_size: 16,
        }
    }
}

impl FinetuneSection {
    pub fn grid(&self) -> Vec<(usize, f64)> {
        self.epochs
            .iter()
            .flat_map(|&e| self.lr.iter().map(move |&lr| (e, lr)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub metric: Metric,
    /// Gaussian std of frozen factors for the random-alpha ablation.
    pub random_alpha_std: f64,
    pub soup_size: usize,
    /// Start the finetune phase from the pretrained weights instead of the searched ones.
    pub reset_w: bool,
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            method: Method::Ours,
            seeds: vec![0],
            metric: Metric::Accuracy,
            random_alpha_std: 0.45,
            soup_size: 5,
            reset_w: false,
            workers: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSection,
    pub synthetic: SyntheticTaskSpec,
    pub data: DataSection,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub search: SearchConfig,
    pub finetune: FinetuneSection,
    pub run: RunSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn task_kind(&self) -> Result<TaskKind> {
        match self.task.source {
            TaskSource::Synthetic => Ok(TaskKind::Classification { classes: 2 }),
            TaskSource::Csv => self.task.task_kind(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.finetune.epochs.is_empty() || self.finetune.lr.is_empty() {
            return Err(Error::Config("finetune grid must have at least one epochs and one lr value".into()));
        }
        if self.finetune.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        if self.run.soup_size == 0 {
            return Err(Error::Config("run.soup_size must be at least 1".into()));
        }
        if !(self.run.random_alpha_std >= 0.0) {
            return Err(Error::Config("run.random_alpha_std must be >= 0".into()));
        }
        let kind = self.task_kind()?;
        if self.run.metric.is_classification() != matches!(kind, TaskKind::Classification { .. }) {
            return Err(Error::Config(format!("metric {} does not fit the task kind", self.run.metric.name())));
        }
        if self.task.source == TaskSource::Synthetic {
            self.synthetic.validate()?;
        }
        self.search.validate()
    }
}
