//! Python bindings: density fusion, pair graphs, toy data, the experiment
//! runner and trained-model prediction.

use std::path::{Path, PathBuf};

use probmix_core::data::{gen_toy_regression, gen_toy_rings, Dataset, Targets};
use probmix_core::densities::{
    categorical_log_linear_fuse, gaussian_log_linear_fuse, gaussian_nll, linear_fuse, mixture_nll, CategoricalDensity,
    GaussianDensity,
};
use probmix_core::error::Error;
use probmix_core::experiment::{self, load_run, ExperimentConfig, RunMeta};
use probmix_core::graphs::knn_graph;
use probmix_core::linalg::Matrix;
use probmix_core::metrics::ExperimentRecord;
use probmix_core::models::{Model, Prediction};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Dimension { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(Matrix::from_rows(rows))
}

fn nested(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn is_linear(pooling: &str) -> PyResult<bool> {
    match pooling {
        "log-linear" => Ok(false),
        "linear" => Ok(true),
        other => Err(PyValueError::new_err(format!("unknown pooling `{other}`"))),
    }
}

/// Log-linear pooling of two diagonal Gaussians; returns `(mean, variance)`.
#[pyfunction]
#[pyo3(signature = (mean_i, var_i, mean_j, var_j, lam))]
fn fuse_gaussians(
    mean_i: Vec<f64>,
    var_i: Vec<f64>,
    mean_j: Vec<f64>,
    var_j: Vec<f64>,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = GaussianDensity::new(mean_i, var_i).map_err(to_py)?;
    let q = GaussianDensity::new(mean_j, var_j).map_err(to_py)?;
    let f = gaussian_log_linear_fuse(&p, &q, lam).map_err(to_py)?;
    Ok((f.mean().to_vec(), f.variance().to_vec()))
}

/// NLL of `y` under the pooled Gaussian.
#[pyfunction]
#[pyo3(signature = (mean_i, var_i, mean_j, var_j, lam, y, pooling = "log-linear"))]
#[allow(clippy::too_many_arguments)]
fn fused_gaussian_nll(
    mean_i: Vec<f64>,
    var_i: Vec<f64>,
    mean_j: Vec<f64>,
    var_j: Vec<f64>,
    lam: f64,
    y: Vec<f64>,
    pooling: &str,
) -> PyResult<f64> {
    let p = GaussianDensity::new(mean_i, var_i).map_err(to_py)?;
    let q = GaussianDensity::new(mean_j, var_j).map_err(to_py)?;
    if is_linear(pooling)? {
        mixture_nll(&linear_fuse(&p, &q, lam).map_err(to_py)?, &y).map_err(to_py)
    } else {
        gaussian_nll(&gaussian_log_linear_fuse(&p, &q, lam).map_err(to_py)?, &y).map_err(to_py)
    }
}

/// Class probabilities of the pooled categorical given two logit vectors.
#[pyfunction]
#[pyo3(signature = (logits_i, logits_j, lam, pooling = "log-linear"))]
fn fuse_categoricals(logits_i: Vec<f64>, logits_j: Vec<f64>, lam: f64, pooling: &str) -> PyResult<Vec<f64>> {
    let p = CategoricalDensity::from_logits(logits_i).map_err(to_py)?;
    let q = CategoricalDensity::from_logits(logits_j).map_err(to_py)?;
    if is_linear(pooling)? {
        if p.num_classes() != q.num_classes() {
            return Err(PyValueError::new_err("class counts differ"));
        }
        let m = linear_fuse(&p, &q, lam).map_err(to_py)?;
        Ok(p.probs().iter().zip(q.probs()).map(|(a, b)| m.weight * a + (1.0 - m.weight) * b).collect())
    } else {
        Ok(categorical_log_linear_fuse(&p, &q, lam).map_err(to_py)?.probs())
    }
}

/// Directed edges `(i, j)` of the `k`-nearest-neighbour graph.
#[pyfunction]
fn knn_edges(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<(usize, usize)>> {
    Ok(knn_graph(&matrix(&points)?, k).map_err(to_py)?.edges().to_vec())
}

fn xy(ds: &Dataset) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    (nested(&ds.features), nested(&ds.targets.as_matrix()))
}

/// `((x_train, y_train), (x_test, y_test))` of the cubic toy problem.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn toy_regression(n_train: usize, n_test: usize, seed: u64) -> PyResult<((Vec<Vec<f64>>, Vec<Vec<f64>>), (Vec<Vec<f64>>, Vec<Vec<f64>>))> {
    let (train, test) = gen_toy_regression(n_train, n_test, seed).map_err(to_py)?;
    Ok((xy(&train), xy(&test)))
}

/// `(x, labels)` of the three-ring toy problem.
#[pyfunction]
fn toy_rings(n: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let ds = gen_toy_rings(n, seed).map_err(to_py)?;
    let Targets::Classification { labels, .. } = &ds.targets else {
        unreachable!("rings are labelled")
    };
    Ok((nested(&ds.features), labels.clone()))
}

/// Built-in checks as `(name, passed, detail)` triples.
#[pyfunction]
fn selftest() -> Vec<(String, bool, String)> {
    experiment::selftest().into_iter().map(|c| (c.name.to_string(), c.passed, c.detail)).collect()
}

/// One row of a results table.
#[pyclass(get_all, frozen, skip_from_py_object)]
#[derive(Clone)]
struct Record {
    run_id: String,
    method: String,
    pooling: String,
    alpha: f64,
    beta: f64,
    k_neighbors: usize,
    seed: u64,
    split: String,
    metric: String,
    value: f64,
}

#[pymethods]
impl Record {
    fn __repr__(&self) -> String {
        format!("Record({}, {}, {}, {})", self.run_id, self.split, self.metric, self.value)
    }
}

impl From<ExperimentRecord> for Record {
    fn from(r: ExperimentRecord) -> Self {
        Self {
            run_id: r.run_id,
            method: r.method,
            pooling: r.pooling,
            alpha: r.alpha,
            beta: r.beta,
            k_neighbors: r.k_neighbors,
            seed: r.seed,
            split: r.split,
            metric: r.metric,
            value: r.value,
        }
    }
}

fn records(r: probmix_core::error::Result<Vec<ExperimentRecord>>) -> PyResult<Vec<Record>> {
    Ok(r.map_err(to_py)?.into_iter().map(Record::from).collect())
}

fn paths(r: probmix_core::error::Result<Vec<PathBuf>>) -> PyResult<Vec<String>> {
    Ok(r.map_err(to_py)?.iter().map(|p| p.display().to_string()).collect())
}

/// A validated experiment configuration and its runner.
#[pyclass(frozen)]
struct Experiment {
    config: ExperimentConfig,
}

#[pymethods]
impl Experiment {
    #[new]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn new(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            config: ExperimentConfig::load(&path, &overrides).map_err(to_py)?,
        })
    }

    /// Builds an experiment from a JSON document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let tree = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            config: ExperimentConfig::from_value(tree).map_err(to_py)?,
        })
    }

    /// The resolved configuration, defaults included.
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn generate(&self, py: Python<'_>, out: PathBuf) -> PyResult<Vec<String>> {
        paths(py.detach(|| experiment::run_generate(&self.config, &out)))
    }

    fn train(&self, py: Python<'_>, out: PathBuf) -> PyResult<Vec<Record>> {
        records(py.detach(|| experiment::run_train(&self.config, &out)))
    }

    /// Runs the grid; returns `(completed, skipped, failed run ids)`.
    fn sweep(&self, py: Python<'_>, out: PathBuf) -> PyResult<(usize, usize, Vec<String>)> {
        let report = py.detach(|| experiment::run_sweep(&self.config, &out)).map_err(to_py)?;
        Ok((report.completed, report.skipped, report.failed.into_iter().map(|(id, _)| id).collect()))
    }

    fn eval(&self, py: Python<'_>, out: PathBuf) -> PyResult<Vec<Record>> {
        records(py.detach(|| experiment::run_eval(&self.config, &out)))
    }

    fn export_plots(&self, py: Python<'_>, out: PathBuf) -> PyResult<Vec<String>> {
        paths(py.detach(|| experiment::run_export_plots(&self.config, &out)))
    }
}

/// A model restored from a run directory. Inputs are in raw units.
#[pyclass(frozen)]
struct TrainedModel {
    meta: RunMeta,
    model: Model,
}

#[pymethods]
impl TrainedModel {
    #[staticmethod]
    fn load(out: PathBuf, run_id: &str) -> PyResult<Self> {
        let (meta, model) = load_run(Path::new(&out), run_id).map_err(to_py)?;
        Ok(Self { meta, model })
    }

    #[getter]
    fn run_id(&self) -> String {
        self.meta.run_id.clone()
    }

    /// Regression: `("gaussian", means, variances)` in raw target units.
    /// Classification: `("categorical", probabilities, [])`.
    #[allow(clippy::type_complexity)]
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(String, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let mut x = matrix(&x)?;
        if let Some(fs) = &self.meta.feature_stats {
            x = fs.apply(&x);
        }
        match self.model.predict(&x).map_err(to_py)? {
            Prediction::Gaussian { mean, var } => {
                let (mean, var) = match &self.meta.target_stats {
                    Some(ts) => {
                        let mut v = var.clone();
                        for r in 0..v.rows() {
                            for (c, s) in ts.std.iter().enumerate() {
                                v.set(r, c, v.get(r, c) * s * s);
                            }
                        }
                        (ts.inverse(&mean), v)
                    }
                    None => (mean, var),
                };
                Ok(("gaussian".into(), nested(&mean), nested(&var)))
            }
            Prediction::Categorical { logits } => {
                let probs = (0..logits.rows())
                    .map(|r| CategoricalDensity::from_logits(logits.row(r).to_vec()).map(|c| c.probs()))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(to_py)?;
                Ok(("categorical".into(), probs, Vec::new()))
            }
        }
    }
}

#[pymodule]
pub fn probmix(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fuse_gaussians, m)?)?;
    m.add_function(wrap_pyfunction!(fused_gaussian_nll, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_categoricals, m)?)?;
    m.add_function(wrap_pyfunction!(knn_edges, m)?)?;
    m.add_function(wrap_pyfunction!(toy_regression, m)?)?;
    m.add_function(wrap_pyfunction!(toy_rings, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    m.add_class::<Record>()?;
    m.add_class::<Experiment>()?;
    m.add_class::<TrainedModel>()?;
    Ok(())
}
