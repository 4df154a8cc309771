//! Command-line front end.
//!
//! Every subcommand prints its fully resolved configuration as one JSON
//! object before doing any work. Exit codes: 0 success, 1 I/O or other
//! runtime failure, 2 invalid configuration or input, 3 output conflict,
//! 4 numeric divergence.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::data::{desk_class_means, generate_synthetic, load_manifest, write_manifest, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate_target, export_embeddings, prepare_output_dir, run_experiment, ExperimentKind,
    ExperimentOutcome, ExperimentSpec, Method, TaskSource, DEFAULT_LAMBDA_GRID,
};
use crate::metrics::MetricsRecord;
use crate::model::checkpoint::load_model;
use crate::overrides;
use crate::scalar::Scalar;
use crate::trainer::{TrainConfig, Trainer, RAMP_FORMULA};

#[derive(Debug, Parser)]
#[command(name = "mfsan", version, about = "Multi-source domain adaptation with per-source alignment")]
struct Cli {
    /// Print more progress lines.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic task and write its CSVs and manifest.
    Generate(GenerateArgs),
    /// Train one model on a manifest.
    Train(TrainArgs),
    /// Run an experiment file.
    Experiment(ExperimentArgs),
    /// Sweep the alignment coefficients.
    Sweep(SweepArgs),
    /// Dump branch features of a trained model.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// TOML file with synthetic-task fields; missing fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, env = "MFSAN_SEED")]
    seed: Option<u64>,
    /// Also regenerates the default class means.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Also regenerates the default class means.
    #[arg(long)]
    feature_dim: Option<usize>,
    /// `key=value` override of a synthetic-task field.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Task manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoint, log and resolved config.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// no_adapt, source_combine, mfsan_mmd, mfsan_disc or mfsan.
    #[arg(long, default_value = "mfsan")]
    method: String,
    /// Training config file (TOML, or a JSON resolved-config echo).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, env = "MFSAN_SEED")]
    seed: Option<u64>,
    /// `key=value` override of a training field, e.g. `alignment.estimator=unbiased_u`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_enum, default_value = "f64")]
    precision: Precision,
    /// Continue from a training checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment file (TOML).
    spec: PathBuf,
    /// Run this seed only, instead of the file's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override of an experiment field, e.g. `train.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Replace the output directory named in the file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Task manifest; the default synthetic task when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated coefficient values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    /// Comma-separated seeds; `MFSAN_SEED` alone when unset, else 0..4.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long, default_value = "sweep_out")]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// `key=value` override of a training field.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "embeddings")]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_)
        | Error::Parse { .. }
        | Error::Label { .. }
        | Error::Shape { .. }
        | Error::Contract(_)
        | Error::Index { .. } => 2,
        Error::OutputConflict(_) => 3,
        Error::Divergence { .. } | Error::NonFinite(_) | Error::DegenerateData(_) => 4,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let verbose = cli.verbose;
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => match a.precision {
            Precision::F64 => cmd_train::<f64>(a, verbose),
            Precision::F32 => cmd_train::<f32>(a, verbose),
        },
        Command::Experiment(a) => cmd_experiment(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportEmbeddings(a) => cmd_export(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn parse_pairs(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter().map(|s| overrides::parse_pair(s)).collect()
}

fn print_resolved(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn read_toml<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Validation(vec![format!("{} not found", path.display())])
        } else {
            Error::Io(e)
        }
    })?;
    toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e
            .span()
            .map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        msg: e.message().to_string(),
    })
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_toml(p)?,
        None => SyntheticSpec::desk_default(),
    };
    if a.num_classes.is_some() || a.feature_dim.is_some() {
        spec.num_classes = a.num_classes.unwrap_or(spec.num_classes);
        spec.feature_dim = a.feature_dim.unwrap_or(spec.feature_dim);
        spec.class_means = desk_class_means(spec.num_classes, spec.feature_dim);
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let spec = overrides::apply(&spec, &parse_pairs(&a.set)?)?;
    spec.validate()?;
    print_resolved(&json!({
        "command": "generate",
        "out": a.out,
        "seed": spec.seed,
        "synthetic": spec,
    }))?;
    prepare_output_dir(&a.out, a.force)?;
    let task = generate_synthetic(&spec)?;
    let files = write_manifest(&a.out, &task)?;
    println!("seed {}: wrote {} files", spec.seed, files.len());
    for f in files {
        println!("  {}", f.display());
    }
    Ok(())
}

fn load_train_config(path: &Path) -> Result<TrainConfig> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let inner = v.get("train_config").cloned().unwrap_or(v);
        serde_json::from_value(inner).map_err(|e| Error::Validation(vec![format!("{}: {e}", path.display())]))
    } else {
        read_toml(path)
    }
}

fn cmd_train<T: Scalar>(a: TrainArgs, verbose: u8) -> Result<()> {
    let method: Method = a.method.parse()?;
    if method == Method::SingleBest {
        return Err(Error::Validation(vec![
            "single_best trains one model per source; use `mfsan experiment`".into(),
        ]));
    }
    let task = load_manifest(&a.manifest)?;
    let view = task.training_view();
    let n = task.num_sources();

    let mut trainer = match &a.resume {
        Some(ckpt) => {
            if a.iterations.is_some() || a.config.is_some() || !a.set.is_empty() {
                return Err(Error::Validation(vec![
                    "--resume continues with the checkpoint's stored config; drop --iterations, --config and --set".into(),
                ]));
            }
            Trainer::<T>::load_checkpoint(ckpt)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => load_train_config(p)?,
                None => TrainConfig::default(),
            };
            cfg = overrides::apply(&cfg, &parse_pairs(&a.set)?)?;
            if let Some(t) = a.iterations {
                cfg.iterations = t;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let cfg = method.train_config(&cfg);
            let (branches, routing) = match method {
                Method::SourceCombine => (1, vec![0; n]),
                _ => (n, (0..n).collect()),
            };
            Trainer::<T>::init_routed(&view, cfg, branches, routing)?
        }
    };

    let resolved = json!({
        "command": "train",
        "manifest": a.manifest,
        "out": a.out,
        "method": method,
        "precision": T::NAME,
        "resume_from": a.resume,
        "start_iteration": trainer.iteration(),
        "num_branches": trainer.model().num_sources(),
        "routing": trainer.routing(),
        "ramp_formula": RAMP_FORMULA,
        "train_config": trainer.config(),
    });
    print_resolved(&resolved)?;
    prepare_output_dir(&a.out, a.force)?;
    std::fs::write(a.out.join("resolved_config.json"), serde_json::to_string_pretty(&resolved)?)?;

    let cfg = trainer.config().clone();
    let expected = cfg.iterations.saturating_sub(trainer.iteration()) / cfg.eval_every + 1;
    let stride = if verbose > 0 { 1 } else { expected.div_ceil(10).max(1) };
    let mut seen = 0usize;
    let mut eval = |m: &crate::model::MfsanModel<T>| -> Result<_> {
        match task.target_labels_eval() {
            Some(_) => evaluate_target(m, &task).map(Some),
            None => Ok(None),
        }
    };
    let mut observe = |r: &MetricsRecord| {
        if seen.is_multiple_of(stride) || r.iteration == cfg.iterations {
            println!("{}", progress_line(r));
        }
        seen += 1;
    };
    let outcome = trainer.run_observed(&view, &mut eval, &mut observe);

    let log_path = a.out.join("log.jsonl");
    let mut f = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    for rec in &outcome.log {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    if let Some(e) = outcome.error {
        return Err(e);
    }
    let ckpt = a.out.join("model.ckpt");
    trainer.save_checkpoint(&ckpt)?;
    println!("wrote {} and {}", ckpt.display(), log_path.display());
    Ok(())
}

fn progress_line(r: &MetricsRecord) -> String {
    let mut s = format!(
        "iter {:>6} p {:.3} lr {:.5} cls {:.4} mmd {:.4} disc {:.4}",
        r.iteration, r.progress, r.lr, r.loss.cls, r.loss.mmd, r.loss.disc
    );
    if let Some(e) = &r.eval {
        let per: Vec<String> = e
            .per_classifier_accuracy
            .iter()
            .map(|a| format!("{a:.3}"))
            .collect();
        s.push_str(&format!(
            " acc {:.4} [{}] disagree {:.3}",
            e.average_vote_accuracy,
            per.join(" "),
            e.max_pairwise_disagreement_rate
        ));
    }
    s
}

fn report(outcome: &ExperimentOutcome) {
    for s in &outcome.summaries {
        println!(
            "{:<15} accuracy {:.4} ± {:.4}  classifier gap {:.4}  ({}/{} seeds)",
            s.method.name(),
            s.average_vote_accuracy.mean,
            s.average_vote_accuracy.std,
            s.classifier_gap.mean,
            s.completed,
            s.seeds.len()
        );
        for f in &s.failures {
            println!("  seed {} failed: {}", f.seed, f.error);
        }
    }
    for (l, s) in &outcome.sweep {
        println!(
            "lambda {l:<6} accuracy {:.4} ± {:.4}  ({}/{} seeds)",
            s.average_vote_accuracy.mean,
            s.average_vote_accuracy.std,
            s.completed,
            s.seeds.len()
        );
    }
    if let Some((without, with)) = outcome.late_band {
        println!("late classifier band: mfsan_mmd {without:.4}, mfsan {with:.4}");
    }
    println!("wrote {} files", outcome.files.len());
}

fn experiment(spec: ExperimentSpec, force: bool) -> Result<()> {
    spec.validate()?;
    print_resolved(&json!({
        "command": "experiment",
        "ramp_formula": RAMP_FORMULA,
        "experiment": spec,
    }))?;
    let outcome = run_experiment::<f64>(&spec, force)?;
    report(&outcome);
    Ok(())
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let mut spec = ExperimentSpec::from_file(&a.spec)?;
    spec = overrides::apply(&spec, &parse_pairs(&a.set)?)?;
    if let Some(s) = a.seed {
        spec.seeds = vec![s];
    }
    if let Some(o) = a.out {
        spec.output_dir = o;
    }
    experiment(spec, a.force)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut train = overrides::apply(&TrainConfig::default(), &parse_pairs(&a.set)?)?;
    if let Some(t) = a.iterations {
        train.iterations = t;
    }
    let seeds = if !a.seeds.is_empty() {
        a.seeds
    } else if let Some(s) = std::env::var("MFSAN_SEED").ok().and_then(|v| v.parse().ok()) {
        vec![s]
    } else {
        vec![0, 1, 2, 3, 4]
    };
    let spec = ExperimentSpec {
        kind: ExperimentKind::SweepLambda,
        methods: vec![Method::Mfsan],
        vary_task_with_seed: a.manifest.is_none(),
        task: a.manifest.map_or_else(TaskSource::default, TaskSource::Manifest),
        train,
        seeds,
        lambda_values: if a.values.is_empty() {
            DEFAULT_LAMBDA_GRID.to_vec()
        } else {
            a.values
        },
        output_dir: a.out,
    };
    experiment(spec, a.force)
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    print_resolved(&json!({
        "command": "export-embeddings",
        "checkpoint": a.checkpoint,
        "manifest": a.manifest,
        "out": a.out,
    }))?;
    let model = load_model::<f64>(&a.checkpoint)?;
    let task = load_manifest(&a.manifest)?;
    let arch = model.architecture();
    if arch.input_dim != task.feature_dim() || arch.num_classes != task.num_classes() {
        return Err(Error::Validation(vec![format!(
            "checkpoint expects {} features and {} classes, task has {} and {}",
            arch.input_dim,
            arch.num_classes,
            task.feature_dim(),
            task.num_classes()
        )]));
    }
    prepare_output_dir(&a.out, a.force)?;
    for p in export_embeddings(&model, &task, &a.out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}
