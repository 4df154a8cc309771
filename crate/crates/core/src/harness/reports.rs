use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::{run_method, run_methods, MethodResult, MethodSummary, Stat};
use super::spec::{Method, TaskSource};
use crate::data::MultiSourceTask;
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, MetricsRecord};
use crate::model::MfsanModel;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    /// `S1`..`SN` for single classifiers, `Avg` for the average vote.
    pub label: String,
    pub without_disc: Stat,
    pub with_disc: Stat,
}

/// Per-classifier target accuracy with and without the discrepancy term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table4Report {
    pub rows: Vec<Table4Row>,
    /// Max accuracy gap between classifiers, over seeds.
    pub gap_without_disc: Stat,
    pub gap_with_disc: Stat,
}

/// Builds the table from the summaries of `mfsan_mmd` (without) and `mfsan` (with).
pub fn table4_report(without: &MethodSummary, with: &MethodSummary) -> Result<Table4Report> {
    let n = with.per_classifier_accuracy.len();
    if n < 2 || without.per_classifier_accuracy.len() != n {
        return Err(Error::Validation(vec![format!(
            "per-classifier report needs matching N >= 2 (got {} and {})",
            without.per_classifier_accuracy.len(),
            n
        )]));
    }
    let mut rows: Vec<Table4Row> = (0..n)
        .map(|i| Table4Row {
            label: format!("S{}", i + 1),
            without_disc: without.per_classifier_accuracy[i],
            with_disc: with.per_classifier_accuracy[i],
        })
        .collect();
    rows.push(Table4Row {
        label: "Avg".into(),
        without_disc: without.average_vote_accuracy,
        with_disc: with.average_vote_accuracy,
    });
    Ok(Table4Report {
        rows,
        gap_without_disc: without.classifier_gap,
        gap_with_disc: with.classifier_gap,
    })
}

pub fn write_table4_csv(path: &Path, r: &Table4Report) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["row", "mfsan_mmd_mean", "mfsan_mmd_std", "mfsan_mean", "mfsan_std"])
        .map_err(csv_err)?;
    let gap = Table4Row {
        label: "max_gap".into(),
        without_disc: r.gap_without_disc,
        with_disc: r.gap_with_disc,
    };
    for row in r.rows.iter().chain(std::iter::once(&gap)) {
        w.write_record([
            row.label.clone(),
            row.without_disc.mean.to_string(),
            row.without_disc.std.to_string(),
            row.with_disc.mean.to_string(),
            row.with_disc.std.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// One coefficient value of a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint<T: Scalar> {
    pub lambda: f64,
    pub result: MethodResult<T>,
}

/// `mfsan` once per value and seed, with `gamma_base = lambda_base = value`.
pub fn sweep_lambda<T: Scalar>(
    task: &TaskSource,
    base: &TrainConfig,
    seeds: &[u64],
    values: &[f64],
    vary_task_with_seed: bool,
) -> Result<Vec<SweepPoint<T>>> {
    if values.is_empty() || values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Validation(vec!["lambda values must be positive and finite".into()]));
    }
    values
        .iter()
        .map(|&v| {
            let cfg = TrainConfig {
                lambda_base: v,
                gamma_base: v,
                ..base.clone()
            };
            Ok(SweepPoint {
                lambda: v,
                result: run_method(Method::Mfsan, task, &cfg, seeds, vary_task_with_seed)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv<T: Scalar>(path: &Path, points: &[SweepPoint<T>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["lambda", "mean_accuracy", "std_accuracy", "completed", "failed"])
        .map_err(csv_err)?;
    for p in points {
        let s = &p.result.summary;
        w.write_record([
            p.lambda.to_string(),
            s.average_vote_accuracy.mean.to_string(),
            s.average_vote_accuracy.std.to_string(),
            s.completed.to_string(),
            s.failures.len().to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Evaluation-time series of `mfsan_mmd` and `mfsan` on a shared iteration grid.
#[derive(Debug, Clone)]
pub struct Convergence<T: Scalar> {
    pub iterations: Vec<usize>,
    pub without_disc: MethodResult<T>,
    pub with_disc: MethodResult<T>,
}

/// `max - min` of the classifier accuracies of one record.
pub fn accuracy_band(r: &MetricsRecord) -> f64 {
    r.eval.as_ref().map_or(f64::NAN, Evaluation::classifier_gap)
}

impl<T: Scalar> Convergence<T> {
    /// Mean over seeds of the mean band across evaluation points in the last
    /// quarter of training (iteration > 0.75 T).
    pub fn late_band(result: &MethodResult<T>, iterations: usize) -> f64 {
        let cut = 0.75 * iterations as f64;
        let per_seed: Vec<f64> = result
            .runs
            .iter()
            .filter_map(|r| r.result.as_ref().ok())
            .map(|t| {
                let late: Vec<f64> = t
                    .log
                    .iter()
                    .filter(|rec| rec.iteration as f64 > cut)
                    .map(accuracy_band)
                    .collect();
                Stat::of(&late).mean
            })
            .collect();
        Stat::of(&per_seed).mean
    }
}

pub fn convergence_log<T: Scalar>(
    task: &TaskSource,
    base: &TrainConfig,
    seeds: &[u64],
    vary_task_with_seed: bool,
) -> Result<Convergence<T>> {
    let mut res = run_methods::<T>(
        &[Method::MfsanMmd, Method::Mfsan],
        task,
        base,
        seeds,
        vary_task_with_seed,
    )?;
    let with_disc = res.pop().expect("two methods");
    let without_disc = res.pop().expect("two methods");
    let iterations = with_disc
        .runs
        .iter()
        .chain(&without_disc.runs)
        .find_map(|r| r.result.as_ref().ok())
        .map(|t| t.log.iter().map(|r| r.iteration).collect())
        .unwrap_or_default();
    Ok(Convergence {
        iterations,
        without_disc,
        with_disc,
    })
}

pub fn write_convergence_csv<T: Scalar>(path: &Path, c: &Convergence<T>) -> Result<()> {
    let n = c
        .with_disc
        .runs
        .iter()
        .find_map(|r| r.result.as_ref().ok())
        .map_or(0, |t| t.model.num_sources());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["method".to_string(), "seed".into(), "iteration".into()];
    header.extend((1..=n).map(|i| format!("s{i}")));
    header.extend(["average_vote".into(), "band".into()]);
    w.write_record(&header).map_err(csv_err)?;
    for res in [&c.without_disc, &c.with_disc] {
        for run in &res.runs {
            let Ok(t) = &run.result else { continue };
            for rec in &t.log {
                let Some(e) = &rec.eval else { continue };
                let mut row = vec![res.method.to_string(), run.seed.to_string(), rec.iteration.to_string()];
                row.extend(e.per_classifier_accuracy.iter().map(f64::to_string));
                row.push(e.average_vote_accuracy.to_string());
                row.push(accuracy_band(rec).to_string());
                w.write_record(&row).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `embeddings_branch<j>.csv` for every branch: branch features of
/// every source and target row, a domain tag and the true label.
pub fn export_embeddings<T: Scalar>(
    model: &MfsanModel<T>,
    task: &MultiSourceTask,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let target_labels = task.target_labels_eval();
    let mut written = Vec::new();
    for j in 0..model.num_sources() {
        let path = dir.join(format!("embeddings_branch{j}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let width = model.architecture().feature_width();
        let mut header: Vec<String> = (0..width).map(|i| format!("feature_{i}")).collect();
        header.extend(["domain".into(), "label".into()]);
        w.write_record(&header).map_err(csv_err)?;
        let mut domains: Vec<(String, &crate::autodiff::Tensor<f64>, Option<&[usize]>)> = task
            .sources()
            .iter()
            .enumerate()
            .map(|(k, s)| (format!("source_{k}"), s.features(), Some(s.labels())))
            .collect();
        domains.push(("target".into(), task.target().features(), target_labels));
        for (tag, x, labels) in domains {
            let h = model.features(j, &x.cast::<T>())?;
            for i in 0..h.rows() {
                let mut row: Vec<String> = h.row(i).iter().map(|v| v.as_f64().to_string()).collect();
                row.push(tag.clone());
                row.push(labels.map_or(String::new(), |l| l[i].to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}
