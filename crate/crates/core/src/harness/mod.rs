//! Experiment orchestration: method comparisons over seeds, per-classifier
//! reports, coefficient sweeps, convergence series and embedding export.
//!
//! Output layout under an experiment's `output_dir`:
//!
//! ```text
//! <method>/<seed>/log.jsonl      one MetricsRecord per evaluation
//! <method>/<seed>/model.ckpt     final parameters
//! <method>/summary.json          mean ± std over seeds
//! table4.csv | sweep_lambda.csv | convergence.csv
//! ```

mod reports;
mod run;
mod spec;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use reports::{
    accuracy_band, convergence_log, export_embeddings, sweep_lambda, table4_report,
    write_convergence_csv, write_sweep_csv, write_table4_csv, Convergence, SweepPoint, Table4Report,
    Table4Row,
};
pub use run::{
    evaluate_target, run_method, run_methods, run_seed, summarize, train_once, MethodResult,
    MethodSummary, SeedFailure, SeedRun, Stat, TrainedRun,
};
pub use spec::{ExperimentKind, ExperimentSpec, Method, TaskSource, DEFAULT_LAMBDA_GRID};

pub use crate::metrics::{Evaluation, MetricsRecord};

use crate::error::{Error, Result};
use crate::model::checkpoint::save_model;
use crate::scalar::Scalar;

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            return Err(Error::OutputConflict(format!(
                "{} exists and is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes logs, final checkpoints and the summary of one method.
pub fn write_method_outputs<T: Scalar>(dir: &Path, result: &MethodResult<T>) -> Result<Vec<PathBuf>> {
    let mdir = dir.join(result.method.name());
    let mut written = Vec::new();
    for run in &result.runs {
        let sdir = mdir.join(run.seed.to_string());
        std::fs::create_dir_all(&sdir)?;
        match &run.result {
            Ok(t) => {
                let p = sdir.join("log.jsonl");
                let mut f = std::io::BufWriter::new(std::fs::File::create(&p)?);
                for rec in &t.log {
                    serde_json::to_writer(&mut f, rec)?;
                    f.write_all(b"\n")?;
                }
                f.flush()?;
                written.push(p);
                let c = sdir.join("model.ckpt");
                save_model(&t.model, &c)?;
                written.push(c);
            }
            Err(e) => {
                let p = sdir.join("error.txt");
                std::fs::write(&p, format!("{e}\n"))?;
                written.push(p);
            }
        }
    }
    let mut summary = serde_json::to_value(&result.summary)?;
    if result.method == Method::SingleBest {
        summary["single_source_accuracy_by_seed"] = result
            .runs
            .iter()
            .map(|r| serde_json::json!({ "seed": r.seed, "accuracies": r.source_accuracies, "best_source": r.best_source }))
            .collect::<Vec<_>>()
            .into();
    }
    let p = mdir.join("summary.json");
    std::fs::write(&p, serde_json::to_string_pretty(&summary)?)?;
    written.push(p);
    Ok(written)
}

/// Everything an experiment produced.
#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub summaries: Vec<MethodSummary>,
    pub table4: Option<Table4Report>,
    /// `(lambda, summary)` per sweep value.
    pub sweep: Vec<(f64, MethodSummary)>,
    /// Late-training classifier band `(mfsan_mmd, mfsan)`.
    pub late_band: Option<(f64, f64)>,
    pub files: Vec<PathBuf>,
}

/// Runs `spec` and writes its outputs.
pub fn run_experiment<T: Scalar>(spec: &ExperimentSpec, force: bool) -> Result<ExperimentOutcome> {
    spec.validate()?;
    let dir = &spec.output_dir;
    prepare_output_dir(dir, force)?;
    let spec_path = dir.join("experiment.json");
    std::fs::write(&spec_path, serde_json::to_string_pretty(spec)?)?;
    let mut out = ExperimentOutcome {
        files: vec![spec_path],
        ..Default::default()
    };
    let vary = spec.vary_task_with_seed;
    match spec.kind {
        ExperimentKind::Run | ExperimentKind::Table4 => {
            let methods = if spec.kind == ExperimentKind::Table4 {
                vec![Method::MfsanMmd, Method::Mfsan]
            } else {
                spec.methods.clone()
            };
            let results = run_methods::<T>(&methods, &spec.task, &spec.train, &spec.seeds, vary)?;
            for r in &results {
                out.files.extend(write_method_outputs(dir, r)?);
                out.summaries.push(r.summary.clone());
            }
            let find = |m| results.iter().find(|r| r.method == m).map(|r| &r.summary);
            if let (Some(a), Some(b)) = (find(Method::MfsanMmd), find(Method::Mfsan)) {
                match table4_report(a, b) {
                    Ok(t) => {
                        let p = dir.join("table4.csv");
                        write_table4_csv(&p, &t)?;
                        out.files.push(p);
                        out.table4 = Some(t);
                    }
                    Err(e) if spec.kind == ExperimentKind::Table4 => return Err(e),
                    Err(_) => {}
                }
            }
        }
        ExperimentKind::SweepLambda => {
            let points = sweep_lambda::<T>(&spec.task, &spec.train, &spec.seeds, &spec.lambda_values, vary)?;
            for p in &points {
                let sub = dir.join(format!("lambda_{}", p.lambda));
                out.files.extend(write_method_outputs(&sub, &p.result)?);
                out.sweep.push((p.lambda, p.result.summary.clone()));
            }
            let p = dir.join("sweep_lambda.csv");
            write_sweep_csv(&p, &points)?;
            out.files.push(p);
        }
        ExperimentKind::Convergence => {
            let c = convergence_log::<T>(&spec.task, &spec.train, &spec.seeds, vary)?;
            for r in [&c.without_disc, &c.with_disc] {
                out.files.extend(write_method_outputs(dir, r)?);
                out.summaries.push(r.summary.clone());
            }
            let t = spec.train.iterations;
            out.late_band = Some((
                Convergence::late_band(&c.without_disc, t),
                Convergence::late_band(&c.with_disc, t),
            ));
            let p = dir.join("convergence.csv");
            write_convergence_csv(&p, &c)?;
            out.files.push(p);
        }
    }
    Ok(out)
}
