//! Datasets: synthetic generators, CSV ingestion, splitting and standardization.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::models::Task;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Matrix),
    Classification { labels: Vec<usize>, classes: usize },
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.rows(),
            Targets::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Targets::Regression(_) => Task::Regression,
            Targets::Classification { .. } => Task::Classification,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        match self {
            Targets::Regression(y) => Targets::Regression(y.select_rows(indices)),
            Targets::Classification { labels, classes } => Targets::Classification {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                classes: *classes,
            },
        }
    }

    /// Regression targets as-is, class labels one-hot encoded.
    pub fn as_matrix(&self) -> Matrix {
        match self {
            Targets::Regression(y) => y.clone(),
            Targets::Classification { labels, classes } => one_hot(labels, *classes),
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), classes);
    for (r, &k) in labels.iter().enumerate() {
        m.set(r, k, 1.0);
    }
    m
}

/// Per-column affine statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Columns with zero variance, left untouched.
    pub constant: Vec<bool>,
}

impl Standardization {
    pub fn fit(m: &Matrix) -> Result<Self> {
        if m.rows() == 0 {
            return Err(Error::invalid("cannot standardize an empty split"));
        }
        let n = m.rows() as f64;
        let mut mean = vec![0.0; m.cols()];
        let mut std = vec![0.0; m.cols()];
        let mut constant = vec![false; m.cols()];
        for c in 0..m.cols() {
            let mu = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / n;
            let var = (0..m.rows()).map(|r| (m.get(r, c) - mu).powi(2)).sum::<f64>() / n;
            if var.sqrt() <= 1e-12 * mu.abs().max(1.0) {
                constant[c] = true;
                std[c] = 1.0;
            } else {
                mean[c] = mu;
                std[c] = var.sqrt();
            }
        }
        Ok(Self { mean, std, constant })
    }

    pub fn apply(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..m.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn inverse(&self, m: &Matrix) -> Matrix {
        let mut out = m.clone();
        for r in 0..m.rows() {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }

    pub fn has_constant_columns(&self) -> bool {
        self.constant.iter().any(|c| *c)
    }

    /// `Σ log std`, the NLL offset between standardized and raw units.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Targets,
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub feature_stats: Option<Standardization>,
    pub target_stats: Option<Standardization>,
}

impl Dataset {
    pub fn new(features: Matrix, targets: Targets) -> Result<Self> {
        if features.rows() != targets.len() {
            return Err(Error::Dimension {
                expected: features.rows(),
                actual: targets.len(),
            });
        }
        if !features.is_finite() {
            return Err(Error::invalid("features contain non-finite values"));
        }
        if let Targets::Regression(y) = &targets {
            if !y.is_finite() {
                return Err(Error::invalid("targets contain non-finite values"));
            }
        }
        if let Targets::Classification { labels, classes } = &targets {
            if let Some(&k) = labels.iter().find(|&&k| k >= *classes) {
                return Err(Error::ClassIndex { index: k, classes: *classes });
            }
        }
        let feature_names = (0..features.cols()).map(|c| format!("x{c}")).collect();
        let target_names = match &targets {
            Targets::Regression(y) => (0..y.cols()).map(|c| format!("y{c}")).collect(),
            Targets::Classification { .. } => vec!["label".to_string()],
        };
        Ok(Self {
            features,
            targets,
            feature_names,
            target_names,
            feature_stats: None,
            target_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        self.targets.task()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    /// Response dimension or class count.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Regression(y) => y.cols(),
            Targets::Classification { classes, .. } => *classes,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            targets: self.targets.select(indices),
            ..self.clone()
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        let targets = match (&self.targets, &other.targets) {
            (Targets::Regression(a), Targets::Regression(b)) => Targets::Regression(Matrix::vcat(&[a, b])),
            (Targets::Classification { labels: a, classes }, Targets::Classification { labels: b, classes: c2 })
                if classes == c2 =>
            {
                Targets::Classification {
                    labels: a.iter().chain(b).copied().collect(),
                    classes: *classes,
                }
            }
            _ => return Err(Error::invalid("cannot concatenate datasets of different kinds")),
        };
        Ok(Self {
            features: Matrix::vcat(&[&self.features, &other.features]),
            targets,
            ..self.clone()
        })
    }
}

/// `y = x³ + ε`, `ε ~ N(0, 9)`; training inputs `U(−4, 4)`, test inputs
/// `U(4, 6)`.
pub fn gen_toy_regression(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::invalid("toy regression needs at least one train and one test point"));
    }
    let mut rng = stream(seed, Stream::Data);
    let noise = Normal::new(0.0, 3.0).expect("valid normal");
    let mut draw = |n: usize, lo: f64, hi: f64| {
        let u = Uniform::new_inclusive(lo, hi).expect("valid range");
        let x: Vec<f64> = (0..n).map(|_| u.sample(&mut rng)).collect();
        let y: Vec<f64> = x.iter().map(|v| v.powi(3) + noise.sample(&mut rng)).collect();
        Dataset::new(Matrix::column(&x), Targets::Regression(Matrix::column(&y)))
    };
    let train = draw(n_train, -4.0, 4.0)?;
    let test = draw(n_test, 4.0, 6.0)?;
    Ok((train, test))
}

pub const RING_RADII: [f64; 3] = [0.5, 1.5, 2.5];
pub const RING_NOISE_STD: f64 = 0.3;

/// Three noisy concentric rings, classes assigned round-robin then shuffled.
pub fn gen_toy_rings(n: usize, seed: u64) -> Result<Dataset> {
    if n < 3 {
        return Err(Error::invalid("rings need at least three points"));
    }
    let mut rng = stream(seed, Stream::Data);
    let mut labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, RING_NOISE_STD).expect("valid normal");
    let mut x = Matrix::zeros(n, 2);
    for (r, &k) in labels.iter().enumerate() {
        let w = rng.random_range(0.0..2.0 * PI);
        x.set(r, 0, RING_RADII[k] * w.cos() + noise.sample(&mut rng));
        x.set(r, 1, RING_RADII[k] * w.sin() + noise.sample(&mut rng));
    }
    Dataset::new(x, Targets::Classification { labels, classes: 3 })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

/// Reads a numeric table. Rows and columns in errors are 1-based positions
/// in the file, the header counting as row 1.
pub fn load_csv(path: &Path, targets: &[Column], has_header: bool, task: Task) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut records = reader.records();
    let mut header: Option<Vec<String>> = None;
    let mut first_row = 1;
    if has_header {
        let rec = records.next().ok_or_else(|| Error::invalid("empty CSV file"))??;
        header = Some(rec.iter().map(str::to_string).collect());
        first_row = 2;
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = header.as_ref().map(Vec::len);
    for (offset, rec) in records.enumerate() {
        let rec = rec?;
        let row = first_row + offset;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(Error::RaggedRow {
                row,
                expected,
                found: rec.len(),
            });
        }
        let values = rec
            .iter()
            .enumerate()
            .map(|(c, cell)| {
                cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::NonNumeric {
                    row,
                    col: c + 1,
                    value: cell.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    let width = width.ok_or_else(|| Error::invalid("CSV file has no data rows"))?;
    if rows.is_empty() {
        return Err(Error::invalid("CSV file has no data rows"));
    }
    let names: Vec<String> = header.unwrap_or_else(|| (0..width).map(|c| format!("c{c}")).collect());
    let mut target_idx = Vec::new();
    for t in targets {
        let idx = match t {
            Column::Index(i) if *i < width => *i,
            Column::Index(i) => return Err(Error::MissingColumn(format!("index {i}"))),
            Column::Name(n) => names
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| Error::MissingColumn(n.clone()))?,
        };
        target_idx.push(idx);
    }
    if target_idx.is_empty() {
        return Err(Error::invalid("at least one target column is required"));
    }
    let feature_idx: Vec<usize> = (0..width).filter(|c| !target_idx.contains(c)).collect();
    let n = rows.len();
    let pick = |cols: &[usize]| {
        Matrix::from_vec(n, cols.len(), rows.iter().flat_map(|r| cols.iter().map(|&c| r[c])).collect())
    };
    let features = pick(&feature_idx);
    let targets = match task {
        Task::Regression => Targets::Regression(pick(&target_idx)),
        Task::Classification => {
            if target_idx.len() != 1 {
                return Err(Error::invalid("classification needs exactly one label column"));
            }
            let c = target_idx[0];
            let labels = rows
                .iter()
                .enumerate()
                .map(|(r, row)| {
                    let v = row[c];
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(Error::NonNumeric {
                            row: first_row + r,
                            col: c + 1,
                            value: v.to_string(),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
            Targets::Classification { labels, classes }
        }
    };
    let mut ds = Dataset::new(features, targets)?;
    ds.feature_names = feature_idx.iter().map(|&c| names[c].clone()).collect();
    ds.target_names = target_idx.iter().map(|&c| names[c].clone()).collect();
    Ok(ds)
}

/// Writes features then targets with a header row. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<&str> = ds.feature_names.iter().chain(&ds.target_names).map(String::as_str).collect();
    w.write_record(&header)?;
    let y = ds.targets.as_matrix();
    for r in 0..ds.len() {
        let mut cells: Vec<String> = ds.features.row(r).iter().map(|v| v.to_string()).collect();
        match &ds.targets {
            Targets::Regression(_) => cells.extend(y.row(r).iter().map(|v| v.to_string())),
            Targets::Classification { labels, .. } => cells.push(labels[r].to_string()),
        }
        w.write_record(&cells)?;
    }
    w.flush()?;
    Ok(())
}

/// Disjoint seeded partition with sizes `round(f · n)`. When the fractions
/// sum to one the last split absorbs rounding so every row is used.
pub fn split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::invalid("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::invalid(format!("split fractions sum to {total} > 1")));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let mut sizes: Vec<usize> = fractions.iter().map(|f| (f * n as f64).round() as usize).collect();
    if (total - 1.0).abs() <= 1e-12 {
        let head: usize = sizes[..sizes.len() - 1].iter().sum();
        *sizes.last_mut().expect("nonempty") = n.saturating_sub(head);
    }
    if sizes.iter().sum::<usize>() > n {
        return Err(Error::invalid("split sizes exceed dataset size"));
    }
    let mut out = Vec::new();
    let mut start = 0;
    for size in sizes {
        if size == 0 {
            return Err(Error::invalid("a split would be empty"));
        }
        out.push(ds.subset(&idx[start..start + size]));
        start += size;
    }
    Ok(out)
}

/// Fits statistics on `train` only and applies them to every split.
/// Regression targets are standardized too when `targets` is set.
pub fn standardize(train: &Dataset, others: &[Dataset], targets: bool) -> Result<(Dataset, Vec<Dataset>)> {
    let fs = Standardization::fit(&train.features)?;
    let ts = match (&train.targets, targets) {
        (Targets::Regression(y), true) => Some(Standardization::fit(y)?),
        _ => None,
    };
    let apply = |d: &Dataset| {
        let mut out = d.clone();
        out.features = fs.apply(&d.features);
        out.feature_stats = Some(fs.clone());
        if let (Some(ts), Targets::Regression(y)) = (&ts, &d.targets) {
            out.targets = Targets::Regression(ts.apply(y));
            out.target_stats = Some(ts.clone());
        }
        out
    };
    Ok((apply(train), others.iter().map(apply).collect()))
}
