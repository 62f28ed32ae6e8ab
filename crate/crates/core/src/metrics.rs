//! Evaluation metrics and cross-seed aggregation.

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Targets};
use crate::densities::{categorical_nll, gaussian_nll, CategoricalDensity, GaussianDensity};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::{Model, Prediction};
use crate::rng::{stream, Stream};

/// How embedding models are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Propagate the embedding mean.
    Deterministic,
    /// Average the likelihood over `samples` embedding draws.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Per-row NLL of `targets` under a batch prediction.
pub fn prediction_nll(pred: &Prediction, targets: &Targets) -> Result<Vec<f64>> {
    if pred.rows() != targets.len() {
        return Err(Error::Dimension {
            expected: pred.rows(),
            actual: targets.len(),
        });
    }
    match (pred, targets) {
        (Prediction::Gaussian { mean, var }, Targets::Regression(y)) => (0..y.rows())
            .map(|r| gaussian_nll(&GaussianDensity::new(mean.row(r).to_vec(), var.row(r).to_vec())?, y.row(r)))
            .collect(),
        (Prediction::Categorical { logits }, Targets::Classification { labels, .. }) => labels
            .iter()
            .enumerate()
            .map(|(r, &k)| categorical_nll(&CategoricalDensity::from_logits(logits.row(r).to_vec())?, k))
            .collect(),
        _ => Err(task_mismatch()),
    }
}

fn task_mismatch() -> Error {
    Error::invalid("model head does not match the dataset task")
}

fn require_nonempty(ds: &Dataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    Ok(())
}

/// Per-sample NLL. Models without an embedding distribution ignore `mode`.
pub fn sample_nll(model: &Model, ds: &Dataset, mode: InferenceMode) -> Result<Vec<f64>> {
    require_nonempty(ds)?;
    match mode {
        InferenceMode::MonteCarlo { samples, seed } if model.has_embedding() => {
            if samples == 0 {
                return Err(Error::invalid("Monte Carlo evaluation needs at least one sample"));
            }
            let q = model.encode_distribution(&ds.features)?;
            let dim = q[0].dim();
            let mut rng = stream(seed, Stream::Eval);
            let mut per_draw = Vec::with_capacity(samples);
            for _ in 0..samples {
                let mut z = Matrix::zeros(q.len(), dim);
                for (r, d) in q.iter().enumerate() {
                    for c in 0..dim {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        z.set(r, c, d.mean()[c] + d.variance()[c].sqrt() * e);
                    }
                }
                per_draw.push(prediction_nll(&model.decode_values(&z, model.spec().mix_layer)?, &ds.targets)?);
            }
            let ln_s = (samples as f64).ln();
            Ok((0..ds.len())
                .map(|r| {
                    let neg: Vec<f64> = per_draw.iter().map(|d| -d[r]).collect();
                    ln_s - crate::densities::log_sum_exp(&neg)
                })
                .collect())
        }
        _ => prediction_nll(&model.predict(&ds.features)?, &ds.targets),
    }
}

pub fn mean_nll(model: &Model, ds: &Dataset, mode: InferenceMode) -> Result<f64> {
    let v = sample_nll(model, ds, mode)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn mse(model: &Model, ds: &Dataset) -> Result<f64> {
    require_nonempty(ds)?;
    let (Prediction::Gaussian { mean, .. }, Targets::Regression(y)) = (model.predict(&ds.features)?, &ds.targets) else {
        return Err(task_mismatch());
    };
    Ok(squared_error(&mean, y))
}

/// Mean squared error over all entries.
pub fn squared_error(pred: &Matrix, y: &Matrix) -> f64 {
    let sum: f64 = pred.as_slice().iter().zip(y.as_slice()).map(|(p, t)| (p - t).powi(2)).sum();
    sum / y.len() as f64
}

pub fn rmse(model: &Model, ds: &Dataset) -> Result<f64> {
    Ok(mse(model, ds)?.sqrt())
}

pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    require_nonempty(ds)?;
    let (Prediction::Categorical { logits }, Targets::Classification { labels, .. }) = (model.predict(&ds.features)?, &ds.targets)
    else {
        return Err(task_mismatch());
    };
    Ok(argmax_accuracy(&logits, labels))
}

pub fn argmax_accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &k)| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == k
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub method: String,
    pub pooling: String,
    pub alpha: f64,
    pub beta: f64,
    pub k_neighbors: usize,
    pub seed: u64,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

pub const RESULTS_HEADER: [&str; 10] = [
    "run_id", "method", "pooling", "alpha", "beta", "k_neighbors", "seed", "split", "metric", "value",
];

/// Grouping key: everything but the seed, run id and value.
#[derive(Clone, Debug, PartialEq, PartialOrd, Serialize)]
pub struct GroupKey {
    pub method: String,
    pub pooling: String,
    pub alpha: f64,
    pub beta: f64,
    pub k_neighbors: usize,
    pub split: String,
    pub metric: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    #[serde(flatten)]
    pub key: GroupKey,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

/// Mean, sample standard deviation (zero for one value) and median.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Summaries per group, ordered by key. Independent of record order.
pub fn aggregate(records: &[ExperimentRecord]) -> Vec<Summary> {
    let mut groups: BTreeMap<String, (GroupKey, Vec<f64>)> = BTreeMap::new();
    for r in records {
        let key = GroupKey {
            method: r.method.clone(),
            pooling: r.pooling.clone(),
            alpha: r.alpha,
            beta: r.beta,
            k_neighbors: r.k_neighbors,
            split: r.split.clone(),
            metric: r.metric.clone(),
        };
        let id = format!(
            "{}\u{0}{}\u{0}{:e}\u{0}{:e}\u{0}{}\u{0}{}\u{0}{}",
            key.method, key.pooling, key.alpha, key.beta, key.k_neighbors, key.split, key.metric
        );
        groups.entry(id).or_insert_with(|| (key, Vec::new())).1.push(r.value);
    }
    groups
        .into_values()
        .map(|(key, mut values)| {
            values.sort_by(f64::total_cmp);
            let (mean, std) = mean_std(&values);
            Summary {
                key,
                n: values.len(),
                mean,
                std,
                median: median(&values),
            }
        })
        .collect()
}
