use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::spec::{Method, TaskSource};
use crate::data::MultiSourceTask;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Evaluation, MetricsRecord};
use crate::model::MfsanModel;
use crate::scalar::Scalar;
use crate::trainer::{TrainConfig, Trainer};

/// Scores a model on the task's target domain. The only place in the
/// harness that reads target labels.
pub fn evaluate_target<T: Scalar>(model: &MfsanModel<T>, task: &MultiSourceTask) -> Result<Evaluation> {
    let labels = task.target_labels_eval().ok_or_else(|| {
        Error::Validation(vec!["target domain has no evaluation labels".into()])
    })?;
    evaluate(model, task.target().features(), labels)
}

/// One trained model and its log.
#[derive(Debug, Clone)]
pub struct TrainedRun<T: Scalar> {
    pub log: Vec<MetricsRecord>,
    pub model: MfsanModel<T>,
    pub final_eval: Evaluation,
}

/// Trains a `num_branches`-branch model on `task` with `routing`.
pub fn train_once<T: Scalar>(
    task: &MultiSourceTask,
    config: &TrainConfig,
    num_branches: usize,
    routing: Vec<usize>,
) -> Result<TrainedRun<T>> {
    let view = task.training_view();
    let mut trainer = Trainer::<T>::init_routed(&view, config.clone(), num_branches, routing)?;
    let log = trainer
        .run(&view, &mut |m| evaluate_target(m, task).map(Some))
        .into_result()?;
    let model = trainer.into_model();
    let final_eval = match log.last() {
        Some(MetricsRecord {
            iteration,
            eval: Some(e),
            ..
        }) if *iteration == config.iterations => e.clone(),
        _ => evaluate_target(&model, task)?,
    };
    Ok(TrainedRun {
        log,
        model,
        final_eval,
    })
}

/// Outcome of one (method, seed) pair.
#[derive(Debug, Clone)]
pub struct SeedRun<T: Scalar> {
    pub seed: u64,
    pub result: std::result::Result<TrainedRun<T>, String>,
    /// `single_best` only: final average-vote accuracy of each one-source model.
    pub source_accuracies: Vec<f64>,
    /// `single_best` only: index of the reported source.
    pub best_source: Option<usize>,
}

impl<T: Scalar> SeedRun<T> {
    pub fn final_eval(&self) -> Option<&Evaluation> {
        self.result.as_ref().ok().map(|r| &r.final_eval)
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Sample standard deviation (divisor `n - 1`); 0 for fewer than two values.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// Per-method aggregate over completed seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub completed: usize,
    pub failures: Vec<SeedFailure>,
    pub average_vote_accuracy: Stat,
    pub per_classifier_accuracy: Vec<Stat>,
    pub classifier_gap: Stat,
    pub max_pairwise_disagreement_rate: Stat,
    /// `(seed, final average-vote accuracy)` of completed seeds.
    pub accuracy_by_seed: Vec<(u64, f64)>,
}

/// Summary statistics from final evaluations.
pub fn summarize(method: Method, seeds: &[u64], finals: &[(u64, Result<Evaluation, String>)]) -> MethodSummary {
    let ok: Vec<(u64, &Evaluation)> = finals
        .iter()
        .filter_map(|(s, r)| r.as_ref().ok().map(|e| (*s, e)))
        .collect();
    let failures = finals
        .iter()
        .filter_map(|(s, r)| {
            r.as_ref().err().map(|e| SeedFailure {
                seed: *s,
                error: e.clone(),
            })
        })
        .collect();
    let acc: Vec<f64> = ok.iter().map(|(_, e)| e.average_vote_accuracy).collect();
    let width = ok.iter().map(|(_, e)| e.per_classifier_accuracy.len()).max().unwrap_or(0);
    let per_classifier_accuracy = (0..width)
        .map(|i| {
            let v: Vec<f64> = ok
                .iter()
                .filter_map(|(_, e)| e.per_classifier_accuracy.get(i).copied())
                .collect();
            Stat::of(&v)
        })
        .collect();
    let gaps: Vec<f64> = ok.iter().map(|(_, e)| e.classifier_gap()).collect();
    let dis: Vec<f64> = ok.iter().map(|(_, e)| e.max_pairwise_disagreement_rate).collect();
    MethodSummary {
        method,
        seeds: seeds.to_vec(),
        completed: ok.len(),
        failures,
        average_vote_accuracy: Stat::of(&acc),
        per_classifier_accuracy,
        classifier_gap: Stat::of(&gaps),
        max_pairwise_disagreement_rate: Stat::of(&dis),
        accuracy_by_seed: ok.iter().map(|(s, e)| (*s, e.average_vote_accuracy)).collect(),
    }
}

/// All seeds of one method.
#[derive(Debug, Clone)]
pub struct MethodResult<T: Scalar> {
    pub method: Method,
    pub runs: Vec<SeedRun<T>>,
    pub summary: MethodSummary,
}

impl<T: Scalar> MethodResult<T> {
    fn from_runs(method: Method, runs: Vec<SeedRun<T>>) -> Self {
        let seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        let finals: Vec<(u64, Result<Evaluation, String>)> = runs
            .iter()
            .map(|r| {
                (
                    r.seed,
                    r.result.as_ref().map(|t| t.final_eval.clone()).map_err(Clone::clone),
                )
            })
            .collect();
        let summary = summarize(method, &seeds, &finals);
        Self {
            method,
            runs,
            summary,
        }
    }
}

/// Trains `method` once for `seed` on an already loaded task.
pub fn run_seed<T: Scalar>(method: Method, task: &MultiSourceTask, base: &TrainConfig, seed: u64) -> SeedRun<T> {
    let mut cfg = method.train_config(base);
    cfg.seed = seed;
    let n = task.num_sources();
    let mut out = SeedRun {
        seed,
        result: Err(String::new()),
        source_accuracies: Vec::new(),
        best_source: None,
    };
    out.result = match method {
        Method::SourceCombine => train_once(task, &cfg, 1, vec![0; n]),
        Method::SingleBest => {
            let mut best: Option<(usize, TrainedRun<T>)> = None;
            let mut err = None;
            for j in 0..n {
                let one = task.with_sources(&[j]).and_then(|t| train_once::<T>(&t, &cfg, 1, vec![0]));
                match one {
                    Ok(r) => {
                        let acc = r.final_eval.average_vote_accuracy;
                        out.source_accuracies.push(acc);
                        let better = best
                            .as_ref()
                            .is_none_or(|(_, b)| acc > b.final_eval.average_vote_accuracy);
                        if better {
                            best = Some((j, r));
                        }
                    }
                    Err(e) => {
                        out.source_accuracies.push(f64::NAN);
                        err.get_or_insert(format!("source {j}: {e}"));
                    }
                }
            }
            match (err, best) {
                (None, Some((j, r))) => {
                    out.best_source = Some(j);
                    Ok(r)
                }
                (Some(e), _) => Err(Error::Contract(e)),
                (None, None) => Err(Error::Contract("no sources".into())),
            }
        }
        _ => train_once(task, &cfg, n, (0..n).collect()),
    }
    .map_err(|e| e.to_string());
    out
}

/// Runs every `(method, seed)` pair in parallel and groups the results by
/// method, in the order given.
pub fn run_methods<T: Scalar>(
    methods: &[Method],
    task: &TaskSource,
    base: &TrainConfig,
    seeds: &[u64],
    vary_task_with_seed: bool,
) -> Result<Vec<MethodResult<T>>> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Validation(vec!["at least one seed is required".into()]));
    }
    let tasks: Vec<MultiSourceTask> = if vary_task_with_seed {
        seeds.iter().map(|&s| task.load(Some(s))).collect::<Result<_>>()?
    } else {
        vec![task.load(None)?]
    };
    let jobs: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..seeds.len()).map(move |s| (m, s)))
        .collect();
    let mut runs: Vec<SeedRun<T>> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let t = &tasks[if vary_task_with_seed { s } else { 0 }];
            run_seed(methods[m], t, base, seeds[s])
        })
        .collect();
    let mut out = Vec::with_capacity(methods.len());
    for &m in methods {
        let rest = runs.split_off(seeds.len());
        out.push(MethodResult::from_runs(m, std::mem::replace(&mut runs, rest)));
    }
    Ok(out)
}

/// [`run_methods`] for a single method.
pub fn run_method<T: Scalar>(
    method: Method,
    task: &TaskSource,
    base: &TrainConfig,
    seeds: &[u64],
    vary_task_with_seed: bool,
) -> Result<MethodResult<T>> {
    Ok(run_methods(&[method], task, base, seeds, vary_task_with_seed)?
        .pop()
        .expect("one method"))
}
