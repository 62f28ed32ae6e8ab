use rand::seq::SliceRandom;

use crate::data::{gen_toy_regression, gen_toy_rings, load_csv, split, standardize, Dataset, Standardization, Targets};
use crate::diffcore::{evaluate, evaluate_with_gradients, OptimizerState};
use crate::error::{Error, Result};
use crate::graphs::{fully_connected, knn_graph, SamplingGraph};
use crate::linalg::Matrix;
use crate::metrics::{prediction_nll, sample_nll, squared_error, argmax_accuracy, ExperimentRecord};
use crate::models::{MlpSpec, Model, Prediction, Task};
use crate::rng::RunStreams;
use crate::vicinal::{erm_loss, loss, Batch, DrawShape, Draws, Family, RegularizerConfig};

use super::config::{DatasetSpec, ExperimentConfig, Selection, Units};

/// Standardized train, validation and test splits of one run.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn target_stats(&self) -> Option<&Standardization> {
        self.train.target_stats.as_ref()
    }
}

/// Builds the splits of run `seed`. Generated data is drawn afresh per seed.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let vf = cfg.training.val_fraction;
    let (pool, test) = match &cfg.dataset {
        DatasetSpec::ToyRegression { n_train, n_test } => gen_toy_regression(*n_train, *n_test, seed)?,
        DatasetSpec::ToyRings { n_train, n_test } => {
            let all = gen_toy_rings(n_train + n_test, seed)?;
            let idx: Vec<usize> = (0..all.len()).collect();
            (all.subset(&idx[..*n_train]), all.subset(&idx[*n_train..]))
        }
        DatasetSpec::Csv {
            path,
            targets,
            has_header,
            task,
            test_fraction,
            test_path,
        } => {
            let ds = load_csv(path, targets, *has_header, *task)?;
            match test_path {
                Some(t) => (ds, load_csv(t, targets, *has_header, *task)?),
                None => {
                    let mut parts = split(&ds, &[1.0 - test_fraction, *test_fraction], seed)?.into_iter();
                    (parts.next().expect("two parts"), parts.next().expect("two parts"))
                }
            }
        }
    };
    let mut parts = split(&pool, &[1.0 - vf, vf], seed.wrapping_add(1))?.into_iter();
    let (train, val) = (parts.next().expect("two parts"), parts.next().expect("two parts"));
    if !cfg.training.standardize_features {
        return Ok(Splits { train, val, test });
    }
    let (train, mut rest) = standardize(&train, &[val, test], cfg.training.standardize_targets)?;
    let test = rest.pop().expect("test split");
    let val = rest.pop().expect("val split");
    Ok(Splits { train, val, test })
}

pub fn model_spec(cfg: &ExperimentConfig, reg: &RegularizerConfig, train: &Dataset) -> MlpSpec {
    MlpSpec {
        input_dim: train.input_dim(),
        hidden: cfg.model.hidden.clone(),
        activation: cfg.model.activation,
        head: cfg.head(),
        output_dim: train.output_dim(),
        mix_layer: reg.mix_layer,
        embedding: reg.method.needs_embedding().then_some(cfg.model.embedding),
    }
}

/// Pairs are drawn from the `K`-nearest-neighbour graph of the inputs for
/// local methods and uniformly otherwise.
pub fn sampling_graph(reg: &RegularizerConfig, features: &Matrix) -> Result<SamplingGraph> {
    let n = features.rows();
    if reg.method.is_local() && n > 1 {
        knn_graph(features, reg.k_neighbors.min(n - 1))
    } else {
        fully_connected(n)
    }
}

fn draw_shape(model: &Model, reg: &RegularizerConfig, ds: &Dataset, batch: usize) -> DrawShape {
    let spec = model.spec();
    DrawShape {
        batch,
        mc_samples: reg.effective_mc(),
        target_dim: match ds.task() {
            Task::Regression => ds.output_dim(),
            Task::Classification => 0,
        },
        embed_dim: if model.has_embedding() { spec.width_at(spec.mix_layer) } else { 0 },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_objective: f64,
    pub val_objective: f64,
    pub val_nll: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn selected(&self) -> &EpochStats {
        &self.history[self.best_epoch]
    }
}

/// Fixed validation draws, so every epoch is scored on the same vicinity.
struct Validator<'a> {
    batch: Batch<'a>,
    draws: Option<Draws>,
}

impl<'a> Validator<'a> {
    fn new(model: &Model, reg: &RegularizerConfig, val: &'a Dataset, seed: u64) -> Result<Self> {
        let batch = Batch::of(val)?;
        let draws = if reg.method.family() == Family::Erm || val.len() < 2 {
            None
        } else {
            let graph = sampling_graph(reg, &val.features)?;
            let shape = draw_shape(model, reg, val, val.len());
            Some(Draws::sample(&graph, reg.mixing(), shape, &mut RunStreams::validation(seed))?)
        };
        Ok(Self { batch, draws })
    }

    fn score(&self, model: &Model, reg: &RegularizerConfig) -> Result<(f64, f64)> {
        let nll = evaluate(model.params(), |t, p| erm_loss(t, p, model, &self.batch))?;
        let objective = match &self.draws {
            Some(d) => evaluate(model.params(), |t, p| loss(t, p, model, &self.batch, d, reg))?,
            None => nll,
        };
        Ok((objective, nll))
    }
}

/// Trains one model. Epoch 0 scores the initialization; epoch `e` scores
/// the parameters after `e` passes.
pub fn train_model(cfg: &ExperimentConfig, reg: &RegularizerConfig, splits: &Splits, seed: u64) -> Result<TrainOutcome> {
    let train = &splits.train;
    let mut streams = RunStreams::new(seed);
    let mut model = Model::init_with_embedding_variance(model_spec(cfg, reg, train), &mut streams.init, cfg.model.embedding_init_variance)?;
    let graph = sampling_graph(reg, &train.features)?;
    let full = Batch::of(train)?;
    let validator = Validator::new(&model, reg, &splits.val, seed)?;
    let mut opt = OptimizerState::new(cfg.training.optimizer, cfg.training.learning_rate, model.params());
    let n = train.len();
    let bs = cfg.training.batch_size.unwrap_or(n).min(n);

    let (val_objective, val_nll) = validator.score(&model, reg)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_objective: f64::NAN,
        val_objective,
        val_nll,
    }];
    let key = |s: &EpochStats| match cfg.training.selection {
        Selection::Objective => s.val_objective,
        Selection::Nll => s.val_nll,
    };
    let mut best = (0, model.params().clone());

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.training.epochs {
        let diverged = |e: Error| Error::Diverged { epoch, source: Box::new(e) };
        if bs < n {
            order.shuffle(&mut streams.edges);
        }
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let draws = Draws::sample(&graph, reg.mixing(), draw_shape(&model, reg, train, chunk.len()), &mut streams)?;
            let (value, grads) = if reg.method.family() == Family::Erm && chunk.len() < n {
                let (x, y) = (train.features.select_rows(chunk), train.targets.select(chunk));
                let sub = Batch::new(&x, &y)?;
                evaluate_with_gradients(model.params(), |t, p| erm_loss(t, p, &model, &sub))
            } else {
                evaluate_with_gradients(model.params(), |t, p| loss(t, p, &model, &full, &draws, reg))
            }
            .map_err(diverged)?;
            opt.step(model.params_mut(), &grads)?;
            total += value * chunk.len() as f64;
        }
        if !model.params().is_finite() {
            return Err(diverged(Error::NonFinite { primitive: "optimizer step" }));
        }
        let (val_objective, val_nll) = validator.score(&model, reg).map_err(diverged)?;
        let stats = EpochStats {
            epoch,
            train_objective: total / n as f64,
            val_objective,
            val_nll,
        };
        if key(&stats) < key(&history[best.0]) {
            best = (epoch, model.params().clone());
        }
        history.push(stats);
    }
    *model.params_mut() = best.1;
    Ok(TrainOutcome {
        model,
        best_epoch: best.0,
        history,
    })
}

/// Metric values of one split, in the configured units.
pub fn split_metrics(model: &Model, ds: &Dataset, cfg: &ExperimentConfig) -> Result<Vec<(&'static str, f64)>> {
    let per_sample = sample_nll(model, ds, cfg.inference)?;
    let mut nll = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
    let pred = model.predict(&ds.features)?;
    match (&pred, &ds.targets) {
        (Prediction::Gaussian { mean, .. }, Targets::Regression(y)) => {
            let (mean, y) = match (cfg.training.report_units, &ds.target_stats) {
                (Units::Raw, Some(ts)) => {
                    nll += ts.log_scale();
                    (ts.inverse(mean), ts.inverse(y))
                }
                _ => (mean.clone(), y.clone()),
            };
            let mse = squared_error(&mean, &y);
            Ok(vec![("nll", nll), ("mse", mse), ("rmse", mse.sqrt())])
        }
        (Prediction::Categorical { logits }, Targets::Classification { labels, .. }) => {
            Ok(vec![("nll", nll), ("accuracy", argmax_accuracy(logits, labels))])
        }
        _ => {
            prediction_nll(&pred, &ds.targets)?;
            unreachable!("prediction_nll rejects mismatched tasks")
        }
    }
}

pub fn run_id(reg: &RegularizerConfig, seed: u64) -> String {
    format!(
        "{}_{}_a{}_b{}_k{}_s{}",
        reg.method,
        reg.pooling.name(),
        reg.alpha,
        reg.beta,
        reg.k_neighbors,
        seed
    )
}

pub fn record(reg: &RegularizerConfig, seed: u64, split: &str, metric: &str, value: f64) -> ExperimentRecord {
    ExperimentRecord {
        run_id: run_id(reg, seed),
        method: reg.method.to_string(),
        pooling: reg.pooling.name().to_string(),
        alpha: reg.alpha,
        beta: reg.beta,
        k_neighbors: reg.k_neighbors,
        seed,
        split: split.to_string(),
        metric: metric.to_string(),
        value,
    }
}

/// Records for every split plus the selection bookkeeping.
pub fn run_records(
    cfg: &ExperimentConfig,
    reg: &RegularizerConfig,
    seed: u64,
    splits: &Splits,
    outcome: &TrainOutcome,
) -> Result<Vec<ExperimentRecord>> {
    let mut out = Vec::new();
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for (metric, value) in split_metrics(&outcome.model, ds, cfg)? {
            out.push(record(reg, seed, name, metric, value));
        }
    }
    let sel = outcome.selected();
    out.push(record(reg, seed, "val", "objective", sel.val_objective));
    out.push(record(reg, seed, "val", "best_epoch", outcome.best_epoch as f64));
    Ok(out)
}

/// Trains and evaluates one (regularizer, seed) run.
pub fn run_one(cfg: &ExperimentConfig, reg: &RegularizerConfig, seed: u64) -> Result<(TrainOutcome, Vec<ExperimentRecord>)> {
    let splits = prepare_data(cfg, seed)?;
    let outcome = train_model(cfg, reg, &splits, seed)?;
    let records = run_records(cfg, reg, seed, &splits, &outcome)?;
    Ok((outcome, records))
}
