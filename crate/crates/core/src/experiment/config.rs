use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Column;
use crate::diffcore::Algorithm;
use crate::error::{Error, Result};
use crate::metrics::InferenceMode;
use crate::models::{Activation, EmbeddingVariance, HeadKind, Task, EMBED_VAR_INIT};
use crate::vicinal::{Method, Pooling, RegularizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    ToyRegression {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_n_train")]
        n_test: usize,
    },
    ToyRings {
        #[serde(default = "default_n_train")]
        n_train: usize,
        #[serde(default = "default_rings_test")]
        n_test: usize,
    },
    Csv {
        path: PathBuf,
        targets: Vec<Column>,
        #[serde(default = "yes")]
        has_header: bool,
        #[serde(default = "default_task")]
        task: Task,
        /// Held out as the test split; ignored when `test_path` is given.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

fn default_n_train() -> usize {
    100
}
fn default_rings_test() -> usize {
    300
}
fn yes() -> bool {
    true
}
fn default_task() -> Task {
    Task::Regression
}
fn default_test_fraction() -> f64 {
    0.1
}

impl DatasetSpec {
    pub fn task(&self) -> Task {
        match self {
            DatasetSpec::ToyRegression { .. } => Task::Regression,
            DatasetSpec::ToyRings { .. } => Task::Classification,
            DatasetSpec::Csv { task, .. } => *task,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::ToyRegression { .. } => "toy-regression",
            DatasetSpec::ToyRings { .. } => "toy-rings",
            DatasetSpec::Csv { .. } => "csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Defaults to a heteroscedastic Gaussian or a softmax by task.
    #[serde(default)]
    pub head: Option<HeadKind>,
    /// Embedding variance used by the M-ProbMix methods.
    #[serde(default = "default_embedding")]
    pub embedding: EmbeddingVariance,
    #[serde(default = "default_embedding_init")]
    pub embedding_init_variance: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 64]
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn default_embedding() -> EmbeddingVariance {
    EmbeddingVariance::Shared
}
fn default_embedding_init() -> f64 {
    EMBED_VAR_INIT
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: default_hidden(),
            activation: default_activation(),
            head: None,
            embedding: default_embedding(),
            embedding_init_variance: default_embedding_init(),
        }
    }
}

/// Which validation loss picks the reported epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// The training objective evaluated on the validation split.
    Objective,
    /// Plain NLL on the validation split.
    Nll,
}

/// Units of reported regression metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Units {
    Standardized,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: Algorithm,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Pairs (or samples, for ERM) per step; full batch when unset.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_selection")]
    pub selection: Selection,
    #[serde(default = "yes")]
    pub standardize_features: bool,
    #[serde(default = "yes")]
    pub standardize_targets: bool,
    #[serde(default = "default_units")]
    pub report_units: Units,
}

fn default_optimizer() -> Algorithm {
    Algorithm::FullBatchGd
}
fn default_lr() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    500
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_selection() -> Selection {
    Selection::Objective
}
fn default_units() -> Units {
    Units::Standardized
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            optimizer: default_optimizer(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: None,
            seeds: default_seeds(),
            val_fraction: default_val_fraction(),
            selection: default_selection(),
            standardize_features: true,
            standardize_targets: true,
            report_units: default_units(),
        }
    }
}

/// Grids crossed with the base configuration by `sweep`. Empty lists keep
/// the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub poolings: Vec<Pooling>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub k_neighbors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotConfig {
    /// Input range of the regression density grid, in raw units.
    #[serde(default = "default_x_range")]
    pub x_range: (f64, f64),
    /// Per-axis range of the classification grid, in raw units.
    #[serde(default = "default_box")]
    pub box_range: (f64, f64),
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_x_range() -> (f64, f64) {
    (-6.0, 6.0)
}
fn default_box() -> (f64, f64) {
    (-3.5, 3.5)
}
fn default_points() -> usize {
    101
}

impl Default for PlotConfig {
    fn default() -> Self {
        Self {
            x_range: default_x_range(),
            box_range: default_box(),
            points: default_points(),
        }
    }
}

fn default_inference() -> InferenceMode {
    InferenceMode::Deterministic
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_inference")]
    pub inference: InferenceMode,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub plots: PlotConfig,
}

impl ExperimentConfig {
    /// Parses a JSON config and applies `key.path=value` overrides. Values
    /// are read as JSON, falling back to a plain string.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut tree: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg = Self::from_value(tree)?;
        if let DatasetSpec::Csv { path: p, test_path, .. } = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new("."));
            *p = resolve(base, p);
            if let Some(t) = test_path {
                *t = resolve(base, t);
            }
        }
        Ok(cfg)
    }

    pub fn from_value(tree: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.regularizer.validate()?;
        let t = &self.training;
        if t.seeds.is_empty() {
            return Err(Error::Config("training.seeds must not be empty".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config("training.learning_rate must be positive".into()));
        }
        if !(t.val_fraction > 0.0 && t.val_fraction < 1.0) {
            return Err(Error::Config("training.val_fraction must lie in (0, 1)".into()));
        }
        if t.batch_size == Some(0) {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(self.model.embedding_init_variance > 1e-6 && self.model.embedding_init_variance.is_finite()) {
            return Err(Error::Config("model.embedding_init_variance must exceed 1e-6".into()));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if self.regularizer.mix_layer > self.model.hidden.len() {
            return Err(Error::Config(format!(
                "regularizer.mix_layer {} exceeds the {} hidden layers",
                self.regularizer.mix_layer,
                self.model.hidden.len()
            )));
        }
        if let Some(head) = self.model.head {
            if head.task() != self.dataset.task() {
                return Err(Error::Config(format!("model.head {head:?} does not fit the dataset task")));
            }
        }
        if let DatasetSpec::Csv { test_fraction, targets, .. } = &self.dataset {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return Err(Error::Config("dataset.test_fraction must lie in (0, 1)".into()));
            }
            if targets.is_empty() {
                return Err(Error::Config("dataset.targets must not be empty".into()));
            }
        }
        if let InferenceMode::MonteCarlo { samples: 0, .. } = self.inference {
            return Err(Error::Config("inference.samples must be positive".into()));
        }
        if self.plots.points < 2 {
            return Err(Error::Config("plots.points must be at least 2".into()));
        }
        let g = &self.sweep;
        if g.alphas.iter().any(|a| !(*a > 0.0)) || g.betas.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config("sweep grids need α > 0 and β ≥ 0".into()));
        }
        Ok(())
    }

    pub fn head(&self) -> HeadKind {
        self.model.head.unwrap_or(match self.dataset.task() {
            Task::Regression => HeadKind::GaussianHeteroscedastic,
            Task::Classification => HeadKind::Softmax,
        })
    }

    /// The regularizer configurations of a sweep, in grid order.
    pub fn grid(&self) -> Vec<RegularizerConfig> {
        let base = &self.regularizer;
        let mut out = Vec::new();
        for &method in &or(&self.sweep.methods, base.method) {
            for &pooling in &or(&self.sweep.poolings, base.pooling) {
                for &alpha in &or(&self.sweep.alphas, base.alpha) {
                    for &beta in &or(&self.sweep.betas, base.beta) {
                        for &k in &or(&self.sweep.k_neighbors, base.k_neighbors) {
                            out.push(RegularizerConfig {
                                method,
                                pooling,
                                alpha,
                                beta,
                                k_neighbors: k,
                                ..base.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

fn or<T: Clone>(grid: &[T], base: T) -> Vec<T> {
    if grid.is_empty() {
        vec![base]
    } else {
        grid.to_vec()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty segment in override key {key:?}")));
        }
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("object")
            }
            _ => return Err(Error::Config(format!("override {key:?}: {part:?} is not inside an object"))),
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    Ok(())
}
