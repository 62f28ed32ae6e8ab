//! Experiment runner: configuration, training runs, sweeps, evaluation and
//! plot-data export. Results go to a long-format CSV with one row per
//! (run, split, metric).

mod config;
mod selftest;
mod train;

pub use config::{
    apply_override, DatasetSpec, ExperimentConfig, ModelConfig, PlotConfig, Selection, SweepGrid, TrainingConfig, Units,
};
pub use selftest::{selftest, SelfTestCheck};
pub use train::{
    model_spec, prepare_data, record, run_id, run_one, run_records, sampling_graph, split_metrics, train_model, EpochStats,
    Splits, TrainOutcome,
};

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{gen_toy_regression, gen_toy_rings, write_csv, Standardization};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{aggregate, ExperimentRecord, RESULTS_HEADER};
use crate::models::{load_checkpoint, save_checkpoint, Model, Prediction};
use crate::vicinal::RegularizerConfig;

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ERRORS_FILE: &str = "errors.log";
pub const SUMMARY_HEADER: [&str; 11] =
    ["method", "pooling", "alpha", "beta", "k_neighbors", "split", "metric", "n", "mean", "std", "median"];

/// Writes the generated datasets of every configured seed to `out/data`.
pub fn run_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("data");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &seed in &cfg.training.seeds {
        let sets = match &cfg.dataset {
            DatasetSpec::ToyRegression { n_train, n_test } => {
                let (train, test) = gen_toy_regression(*n_train, *n_test, seed)?;
                vec![("train", train), ("test", test)]
            }
            DatasetSpec::ToyRings { n_train, n_test } => {
                let all = gen_toy_rings(n_train + n_test, seed)?;
                let idx: Vec<usize> = (0..all.len()).collect();
                vec![("train", all.subset(&idx[..*n_train])), ("test", all.subset(&idx[*n_train..]))]
            }
            DatasetSpec::Csv { .. } => return Err(Error::Config("generate needs a synthetic dataset".into())),
        };
        for (split, ds) in sets {
            let path = dir.join(format!("{}_seed{seed}_{split}.csv", cfg.dataset.name()));
            write_csv(&ds, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// What export and evaluation need to rebuild a run's input pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub seed: u64,
    pub regularizer: RegularizerConfig,
    pub feature_stats: Option<Standardization>,
    pub target_stats: Option<Standardization>,
    pub best_epoch: usize,
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn save_run(out: &Path, meta: &RunMeta, model: &Model) -> Result<()> {
    let dir = checkpoint_dir(out);
    fs::create_dir_all(&dir)?;
    save_checkpoint(model, &dir.join(format!("{}.ckpt", meta.run_id)))?;
    fs::write(dir.join(format!("{}.json", meta.run_id)), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_run(out: &Path, run_id: &str) -> Result<(RunMeta, Model)> {
    let dir = checkpoint_dir(out);
    let ckpt = dir.join(format!("{run_id}.ckpt"));
    if !ckpt.exists() {
        return Err(Error::Checkpoint {
            path: ckpt,
            msg: "missing checkpoint".into(),
        });
    }
    let meta: RunMeta = serde_json::from_str(&fs::read_to_string(dir.join(format!("{run_id}.json")))?)?;
    Ok((meta, load_checkpoint(&ckpt)?))
}

/// Runs of the base regularizer and the sweep grid that have a checkpoint
/// under `out`, in grid order.
pub fn saved_runs(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(RegularizerConfig, u64)>> {
    let mut regs = vec![cfg.regularizer.clone()];
    for reg in cfg.grid() {
        if !regs.contains(&reg) {
            regs.push(reg);
        }
    }
    let dir = checkpoint_dir(out);
    let runs: Vec<_> = regs
        .into_iter()
        .flat_map(|reg| cfg.training.seeds.iter().map(move |&seed| (reg.clone(), seed)))
        .filter(|(reg, seed)| dir.join(format!("{}.ckpt", run_id(reg, *seed))).exists())
        .collect();
    if runs.is_empty() {
        return Err(Error::Checkpoint {
            path: dir,
            msg: "no checkpoints for the configured runs".into(),
        });
    }
    Ok(runs)
}

fn train_and_save(cfg: &ExperimentConfig, reg: &RegularizerConfig, seed: u64, out: &Path) -> Result<Vec<ExperimentRecord>> {
    let splits = prepare_data(cfg, seed)?;
    let outcome = train_model(cfg, reg, &splits, seed)?;
    let records = run_records(cfg, reg, seed, &splits, &outcome)?;
    let meta = RunMeta {
        run_id: run_id(reg, seed),
        seed,
        regularizer: reg.clone(),
        feature_stats: splits.train.feature_stats.clone(),
        target_stats: splits.train.target_stats.clone(),
        best_epoch: outcome.best_epoch,
    };
    save_run(out, &meta, &outcome.model)?;
    Ok(records)
}

pub fn write_records(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if records.is_empty() {
        w.write_record(RESULTS_HEADER)?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn write_summary(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for s in aggregate(records) {
        let k = &s.key;
        w.serialize((&k.method, &k.pooling, k.alpha, k.beta, k.k_neighbors, &k.split, &k.metric, s.n, s.mean, s.std, s.median))?;
    }
    w.flush()?;
    Ok(())
}

/// Trains every configured seed of the base regularizer.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ExperimentRecord>> {
    fs::create_dir_all(out)?;
    let mut records = Vec::new();
    for &seed in &cfg.training.seeds {
        records.extend(train_and_save(cfg, &cfg.regularizer, seed, out)?);
    }
    write_records(&out.join(RESULTS_FILE), &records)?;
    write_summary(&out.join(SUMMARY_FILE), &records)?;
    Ok(records)
}

/// Outcome of a sweep.
#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub completed: usize,
    pub skipped: usize,
    pub failed: Vec<(String, String)>,
}

/// Runs the grid × seeds in parallel. Rows are appended as runs finish and
/// the file is rewritten in grid order at the end. Runs already present in
/// an existing results file are not recomputed; failed runs are retried.
pub fn run_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    fs::create_dir_all(out)?;
    let path = out.join(RESULTS_FILE);
    let existing = if path.exists() { read_records(&path)? } else { Vec::new() };
    let done: HashSet<String> = existing
        .iter()
        .filter(|r| r.metric != "failed")
        .map(|r| r.run_id.clone())
        .collect();
    let jobs: Vec<(RegularizerConfig, u64)> = cfg
        .grid()
        .into_iter()
        .flat_map(|reg| cfg.training.seeds.iter().map(move |&s| (reg.clone(), s)))
        .collect();
    let order: Vec<String> = jobs.iter().map(|(r, s)| run_id(r, *s)).collect();
    for (reg, _) in &jobs {
        reg.validate()?;
    }

    let kept: Vec<ExperimentRecord> = existing.into_iter().filter(|r| done.contains(&r.run_id)).collect();
    let mut writer = csv::Writer::from_path(&path)?;
    if kept.is_empty() {
        writer.write_record(RESULTS_HEADER)?;
    }
    for r in &kept {
        writer.serialize(r)?;
    }
    writer.flush()?;
    let sink = Mutex::new((writer, kept, SweepReport::default()));

    jobs.par_iter().for_each(|(reg, seed)| {
        let id = run_id(reg, *seed);
        if done.contains(&id) {
            sink.lock().expect("sink").2.skipped += 1;
            return;
        }
        let result = train_and_save(cfg, reg, *seed, out);
        let mut guard = sink.lock().expect("sink");
        let (w, all, report) = &mut *guard;
        let rows = match result {
            Ok(rows) => {
                report.completed += 1;
                rows
            }
            Err(e) => {
                report.failed.push((id.clone(), e.to_string()));
                vec![record(reg, *seed, "run", "failed", 1.0)]
            }
        };
        for r in &rows {
            let _ = w.serialize(r);
        }
        let _ = w.flush();
        all.extend(rows);
    });

    let (writer, mut all, mut report) = sink.into_inner().expect("sink");
    drop(writer);
    let rank = |id: &str| order.iter().position(|o| o == id).unwrap_or(usize::MAX);
    all.sort_by_key(|r| rank(&r.run_id));
    write_records(&path, &all)?;
    write_summary(&out.join(SUMMARY_FILE), &all)?;
    report.failed.sort();
    if !report.failed.is_empty() {
        let mut log = fs::File::create(out.join(ERRORS_FILE))?;
        for (id, msg) in &report.failed {
            writeln!(log, "{id}: {msg}")?;
        }
    }
    Ok(report)
}

/// Re-evaluates the saved checkpoints under the configured
/// inference mode and writes `eval.csv`.
pub fn run_eval(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut records = Vec::new();
    for (reg, seed) in saved_runs(cfg, out)? {
        let (_, model) = load_run(out, &run_id(&reg, seed))?;
        let splits = prepare_data(cfg, seed)?;
        for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            for (metric, value) in split_metrics(&model, ds, cfg)? {
                records.push(record(&reg, seed, name, metric, value));
            }
        }
    }
    write_records(&out.join("eval.csv"), &records)?;
    Ok(records)
}

/// Standard normal 97.5% quantile.
const Z975: f64 = 1.959_963_984_540_054;

fn grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn standardized(meta: &RunMeta, x: &Matrix) -> Matrix {
    match &meta.feature_stats {
        Some(fs) => fs.apply(x),
        None => x.clone(),
    }
}

/// Density bands for 1-D regression runs and class-probability grids for
/// 2-D classification runs, one CSV per saved checkpoint.
pub fn run_export_plots(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("plots");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for (reg, seed) in saved_runs(cfg, out)? {
        let (meta, model) = load_run(out, &run_id(&reg, seed))?;
        written.push(export_one(&meta, &model, &cfg.plots, &dir)?);
    }
    Ok(written)
}

pub fn export_one(meta: &RunMeta, model: &Model, plots: &PlotConfig, dir: &Path) -> Result<PathBuf> {
    let spec = model.spec();
    match spec.input_dim {
        1 => {
            let xs = grid(plots.x_range.0, plots.x_range.1, plots.points);
            let x = Matrix::column(&xs);
            let Prediction::Gaussian { mean, var } = model.predict(&standardized(meta, &x))? else {
                return Err(Error::invalid("density export needs a regression model"));
            };
            let (mean, sd) = match &meta.target_stats {
                Some(ts) => (ts.inverse(&mean), var.map(|v| v.sqrt() * ts.std[0])),
                None => (mean, var.map(f64::sqrt)),
            };
            let path = dir.join(format!("{}_density.csv", meta.run_id));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["x", "mean", "band_lower", "band_upper"])?;
            for (r, x) in xs.iter().enumerate() {
                let (m, s) = (mean.get(r, 0), sd.get(r, 0));
                w.write_record([x, &m, &(m - Z975 * s), &(m + Z975 * s)].map(|v| v.to_string()))?;
            }
            w.flush()?;
            Ok(path)
        }
        2 => {
            let axis = grid(plots.box_range.0, plots.box_range.1, plots.points);
            let rows: Vec<Vec<f64>> = axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect();
            let x = Matrix::from_rows(&rows);
            let probs: Vec<Vec<f64>> = model
                .forward_classification(&standardized(meta, &x))?
                .iter()
                .map(|d| d.probs())
                .collect();
            let path = dir.join(format!("{}_classes.csv", meta.run_id));
            let mut w = csv::Writer::from_path(&path)?;
            let mut header = vec!["x1".to_string(), "x2".to_string()];
            header.extend((0..spec.output_dim).map(|k| format!("p{k}")));
            w.write_record(&header)?;
            for (row, p) in rows.iter().zip(&probs) {
                w.write_record(row.iter().chain(p).map(|v| v.to_string()))?;
            }
            w.flush()?;
            Ok(path)
        }
        d => Err(Error::invalid(format!("plot export supports 1-D regression and 2-D classification, got {d} inputs"))),
    }
}
