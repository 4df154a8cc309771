//! Minibatch SGD with momentum over the combined objective, with annealed
//! learning rate, ramped alignment coefficients and resumable checkpoints.
//!
//! A [`Trainer`] owns one model, its optimizer state and one sampler per
//! domain. It reads data only through a [`TrainingView`], so target labels
//! are out of reach; evaluation is delegated to a caller-supplied closure.

mod config;
mod optimizer;
mod schedule;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{SourceMode, TrainConfig};
pub use optimizer::SgdMomentum;
pub use schedule::{lr_at, ramp_at, ScheduleState, RAMP_FORMULA};

use crate::autodiff::{Graph, Tensor};
use crate::data::{BatchSampler, SamplerState, TrainingView};
use crate::error::{Error, Result};
use crate::metrics::{Evaluation, LossValues, MetricsRecord};
use crate::model::checkpoint::Container;
use crate::model::{total_loss, MfsanModel, SourceBatch};
use crate::scalar::Scalar;

/// RNG stream for parameter initialization; samplers use streams `0..=N`.
const INIT_STREAM: u64 = 1 << 32;

/// What one call to [`Trainer::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Zero-based index of the executed step.
    pub iteration: usize,
    pub progress: f64,
    pub lr: f64,
    pub lambda_eff: f64,
    pub gamma_eff: f64,
    pub loss: LossValues,
}

/// Log of a run and the error that stopped it, if any.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<MetricsRecord>,
    pub error: Option<Error>,
}

impl TrainOutcome {
    pub fn into_result(self) -> Result<Vec<MetricsRecord>> {
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.log),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    scalar: String,
    iteration: usize,
    config: TrainConfig,
    routing: Vec<usize>,
    source_samplers: Vec<SamplerState>,
    target_sampler: SamplerState,
}

#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    config: TrainConfig,
    model: MfsanModel<T>,
    optimizer: SgdMomentum<T>,
    /// `routing[j]`: branch trained on source `j`.
    routing: Vec<usize>,
    source_samplers: Vec<BatchSampler>,
    target_sampler: BatchSampler,
    iteration: usize,
}

fn velocity_name(param: &str) -> String {
    format!("velocity.{param}")
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model with one branch per source, initialized from `config.seed`.
    pub fn init(view: &TrainingView<'_>, config: TrainConfig) -> Result<Self> {
        let n = view.num_sources();
        Self::init_routed(view, config, n, (0..n).collect())
    }

    /// Fresh model with `num_branches` branches; source `j` trains branch `routing[j]`.
    pub fn init_routed(
        view: &TrainingView<'_>,
        config: TrainConfig,
        num_branches: usize,
        routing: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(INIT_STREAM);
        let model = MfsanModel::new(config.architecture(view, num_branches), &mut rng)?;
        Self::new(model, view, config, routing)
    }

    /// Wraps an existing model with zero velocities and fresh samplers.
    pub fn new(
        model: MfsanModel<T>,
        view: &TrainingView<'_>,
        config: TrainConfig,
        routing: Vec<usize>,
    ) -> Result<Self> {
        config.validate()?;
        let arch = model.architecture();
        let mut errs = Vec::new();
        if arch.input_dim != view.feature_dim {
            errs.push(format!(
                "model input_dim {} differs from task feature_dim {}",
                arch.input_dim, view.feature_dim
            ));
        }
        if arch.num_classes != view.num_classes {
            errs.push(format!(
                "model num_classes {} differs from task num_classes {}",
                arch.num_classes, view.num_classes
            ));
        }
        if routing.len() != view.num_sources() {
            errs.push(format!(
                "routing has {} entries for {} sources",
                routing.len(),
                view.num_sources()
            ));
        }
        if let Some(&b) = routing.iter().find(|&&b| b >= arch.num_sources) {
            errs.push(format!("routing names branch {b} of a {}-branch model", arch.num_sources));
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let n = view.num_sources() as u64;
        let source_samplers = view
            .sources
            .iter()
            .zip(0..)
            .map(|(s, j)| {
                BatchSampler::new(s.len(), config.batch_size, config.sampler_mode, config.seed, j)
            })
            .collect::<Result<Vec<_>>>()?;
        let target_sampler = BatchSampler::new(
            view.target.len(),
            config.batch_size,
            config.sampler_mode,
            config.seed,
            n,
        )?;
        let optimizer = SgdMomentum::new(
            &model,
            T::lit(config.momentum),
            T::lit(config.lr_multiplier_scratch),
        );
        Ok(Self {
            config,
            model,
            optimizer,
            routing,
            source_samplers,
            target_sampler,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &MfsanModel<T> {
        &self.model
    }

    pub fn into_model(self) -> MfsanModel<T> {
        self.model
    }

    pub fn optimizer(&self) -> &SgdMomentum<T> {
        &self.optimizer
    }

    pub fn routing(&self) -> &[usize] {
        &self.routing
    }

    /// Steps completed so far.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Schedule position of the next step.
    pub fn schedule(&self) -> ScheduleState {
        let c = &self.config;
        ScheduleState::at(self.iteration, c.iterations, c.eta0, c.alpha, c.beta, c.theta)
    }

    fn check_view(&self, view: &TrainingView<'_>) -> Result<()> {
        let sizes_match = view.num_sources() == self.source_samplers.len()
            && view
                .sources
                .iter()
                .zip(&self.source_samplers)
                .all(|(d, s)| d.len() == s.domain_size())
            && view.target.len() == self.target_sampler.domain_size()
            && view.feature_dim == self.model.architecture().input_dim;
        if sizes_match {
            Ok(())
        } else {
            Err(Error::Contract("task does not match the trainer's samplers".into()))
        }
    }

    /// One SGD update on freshly sampled minibatches.
    pub fn step(&mut self, view: &TrainingView<'_>) -> Result<StepReport> {
        self.check_view(view)?;
        let sched = self.schedule();
        let lambda_eff = self.config.lambda_base * sched.ramp;
        let gamma_eff = self.config.gamma_base * sched.ramp;
        let active: Vec<usize> = match self.config.source_mode {
            SourceMode::RoundRobin => vec![self.iteration % self.source_samplers.len()],
            SourceMode::AllSources => (0..self.source_samplers.len()).collect(),
        };
        let mut xs = Vec::with_capacity(active.len());
        let mut ys = Vec::with_capacity(active.len());
        for &j in &active {
            let idx = self.source_samplers[j].next_indices();
            let (x, y) = view.sources[j].batch(&idx);
            xs.push(x.cast::<T>());
            ys.push(y);
        }
        let xt = view
            .target
            .batch(&self.target_sampler.next_indices())
            .cast::<T>();
        let batches: Vec<SourceBatch<'_, T>> = active
            .iter()
            .enumerate()
            .map(|(b, &j)| SourceBatch {
                branch: self.routing[j],
                features: &xs[b],
                labels: &ys[b],
            })
            .collect();

        let g = Graph::new();
        let bound = self.model.bind(&g);
        let parts = total_loss(
            &bound,
            &batches,
            &xt,
            &self.config.alignment,
            T::lit(lambda_eff),
            T::lit(gamma_eff),
        )
        .map_err(|e| match e {
            Error::NonFinite(what) => Error::Divergence {
                iteration: self.iteration,
                component: what,
            },
            other => other,
        })?;
        let (cls, mmd, disc, total) = parts.values();
        for (name, v) in [("cls loss", cls), ("mmd loss", mmd), ("disc loss", disc), ("total loss", total)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    iteration: self.iteration,
                    component: name.into(),
                });
            }
        }
        let grads = g.backward(parts.total)?;
        let grads: Vec<Tensor<T>> = bound
            .param_vars()
            .iter()
            .map(|&v| grads.get_or_zeros(v))
            .collect();
        if let Some(i) = grads.iter().position(|t| !t.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iteration,
                component: format!("gradient of {}", self.model.param_names()[i]),
            });
        }
        self.optimizer.step(&mut self.model, &grads, T::lit(sched.lr))?;
        if !self.model.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                component: "parameters after update".into(),
            });
        }
        let report = StepReport {
            iteration: self.iteration,
            progress: sched.progress,
            lr: sched.lr,
            lambda_eff,
            gamma_eff,
            loss: LossValues {
                cls: cls.as_f64(),
                mmd: mmd.as_f64(),
                disc: disc.as_f64(),
                total: total.as_f64(),
            },
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Steps until `config.iterations` are done, evaluating every
    /// `eval_every` completed steps and after the last one. `eval` returns
    /// `None` when there is nothing to score against.
    pub fn run(
        &mut self,
        view: &TrainingView<'_>,
        eval: &mut dyn FnMut(&MfsanModel<T>) -> Result<Option<Evaluation>>,
    ) -> TrainOutcome {
        self.run_observed(view, eval, &mut |_| {})
    }

    /// [`Trainer::run`], handing each record to `observe` as it is produced.
    pub fn run_observed(
        &mut self,
        view: &TrainingView<'_>,
        eval: &mut dyn FnMut(&MfsanModel<T>) -> Result<Option<Evaluation>>,
        observe: &mut dyn FnMut(&MetricsRecord),
    ) -> TrainOutcome {
        let mut log = Vec::new();
        while self.iteration < self.config.iterations {
            let report = match self.step(view) {
                Ok(r) => r,
                Err(e) => return TrainOutcome { log, error: Some(e) },
            };
            let due = self.iteration.is_multiple_of(self.config.eval_every)
                || self.iteration == self.config.iterations;
            if !due {
                continue;
            }
            let evaluation = match eval(&self.model) {
                Ok(e) => e,
                Err(e) => return TrainOutcome { log, error: Some(e) },
            };
            let rec = MetricsRecord {
                iteration: self.iteration,
                progress: report.progress,
                lr: report.lr,
                lambda_eff: report.lambda_eff,
                gamma_eff: report.gamma_eff,
                loss: report.loss,
                eval: evaluation,
            };
            observe(&rec);
            log.push(rec);
        }
        TrainOutcome { log, error: None }
    }

    /// Writes model, velocities, sampler states, routing, config and step count.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut c = Container::from_model(&self.model);
        for (name, v) in self.model.param_names().iter().zip(self.optimizer.velocities()) {
            c.tensors.push((velocity_name(name), v.cast::<f64>()));
        }
        let state = TrainerState {
            scalar: T::NAME.into(),
            iteration: self.iteration,
            config: self.config.clone(),
            routing: self.routing.clone(),
            source_samplers: self.source_samplers.iter().map(BatchSampler::state).collect(),
            target_sampler: self.target_sampler.state(),
        };
        c.extra = serde_json::json!({ "trainer": state });
        c.save(path)
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`]; stepping it
    /// continues the interrupted trajectory exactly.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let c = Container::load(path)?;
        let state: TrainerState = serde_json::from_value(
            c.extra
                .get("trainer")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no trainer state (model-only checkpoint?)".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))?;
        if state.scalar != T::NAME {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} training state, requested {}",
                state.scalar,
                T::NAME
            )));
        }
        let model = c.to_model::<T>()?;
        let mut velocities = Vec::new();
        for name in model.param_names() {
            let v = c
                .tensor(&velocity_name(&name))
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", velocity_name(&name))))?;
            velocities.push(v.cast::<T>());
        }
        let mut optimizer = SgdMomentum::new(
            &model,
            T::lit(state.config.momentum),
            T::lit(state.config.lr_multiplier_scratch),
        );
        optimizer.set_velocities(velocities)?;
        let source_samplers = state
            .source_samplers
            .iter()
            .map(BatchSampler::from_state)
            .collect::<Result<Vec<_>>>()?;
        if state.routing.len() != source_samplers.len()
            || state.routing.iter().any(|&b| b >= model.num_sources())
        {
            return Err(Error::Checkpoint("routing inconsistent with model".into()));
        }
        Ok(Self {
            config: state.config,
            model,
            optimizer,
            routing: state.routing,
            source_samplers,
            target_sampler: BatchSampler::from_state(&state.target_sampler)?,
            iteration: state.iteration,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, MultiSourceTask, SyntheticSpec};
    use crate::model::Architecture;

    fn small_task() -> MultiSourceTask {
        let mut spec = SyntheticSpec::desk_default();
        spec.samples_per_domain = 64;
        generate_synthetic(&spec).unwrap()
    }

    fn cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 16,
            eval_every: 10,
            common_widths: vec![8],
            branch_widths: vec![8, 6],
            ..TrainConfig::default()
        }
    }

    fn no_eval(_: &MfsanModel<f64>) -> Result<Option<Evaluation>> {
        Ok(None)
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let task = small_task();
        let view = task.training_view();
        let mut t = Trainer::<f64>::init(&view, cfg(0)).unwrap();
        let before = t.model().clone();
        let out = t.run(&view, &mut no_eval);
        assert!(out.error.is_none() && out.log.is_empty());
        assert_eq!(t.model(), &before);
    }

    #[test]
    fn same_seed_same_bits() {
        let task = small_task();
        let view = task.training_view();
        for mode in [SourceMode::RoundRobin, SourceMode::AllSources] {
            let c = TrainConfig {
                source_mode: mode,
                ..cfg(30)
            };
            let run = || {
                let mut t = Trainer::<f64>::init(&view, c.clone()).unwrap();
                let log = t.run(&view, &mut no_eval).into_result().unwrap();
                (t.into_model(), log)
            };
            let (a, la) = run();
            let (b, lb) = run();
            assert_eq!(a, b);
            assert_eq!(la, lb);
            assert_eq!(la.len(), 3);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let task = small_task();
        let view = task.training_view();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");

        let mut full = Trainer::<f64>::init(&view, cfg(40)).unwrap();
        full.run(&view, &mut no_eval).into_result().unwrap();

        let mut half = Trainer::<f64>::init(&view, cfg(40)).unwrap();
        for _ in 0..20 {
            half.step(&view).unwrap();
        }
        half.save_checkpoint(&path).unwrap();
        drop(half);
        let mut resumed = Trainer::<f64>::load_checkpoint(&path).unwrap();
        assert_eq!(resumed.iteration(), 20);
        resumed.run(&view, &mut no_eval).into_result().unwrap();
        assert_eq!(resumed.model(), full.model());
        assert_eq!(resumed.optimizer(), full.optimizer());
    }

    #[test]
    fn checkpoint_scalar_mismatch_rejected() {
        let task = small_task();
        let view = task.training_view();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        Trainer::<f32>::init(&view, cfg(5)).unwrap().save_checkpoint(&path).unwrap();
        assert!(Trainer::<f32>::load_checkpoint(&path).is_ok());
        assert!(matches!(
            Trainer::<f64>::load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn round_robin_alternates_sources() {
        let task = small_task();
        let view = task.training_view();
        let mut t = Trainer::<f64>::init(&view, cfg(4)).unwrap();
        let untouched = t.source_samplers[1].state();
        t.step(&view).unwrap();
        assert_eq!(t.source_samplers[1].state(), untouched);
        t.step(&view).unwrap();
        assert_ne!(t.source_samplers[1].state(), untouched);
    }

    fn tiny_model() -> MfsanModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        MfsanModel::new(Architecture::desk_default(2, 2, 2), &mut rng).unwrap()
    }

    fn fake_grads(m: &MfsanModel<f64>, scale: f64) -> Vec<Tensor<f64>> {
        m.params()
            .iter()
            .map(|p| p.map(|v| scale * v + 0.25))
            .collect()
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut opt = SgdMomentum::new(&m, 0.9, 10.0);
        let g = fake_grads(&m, 1.0);
        opt.step(&mut m, &g, 0.0).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn plain_sgd_step_is_minus_lr_grad() {
        let mut m = tiny_model();
        let before = m.clone();
        let mut opt = SgdMomentum::new(&m, 0.0, 10.0);
        let g = fake_grads(&m, -0.5);
        let lr = 0.01;
        opt.step(&mut m, &g, lr).unwrap();
        let groups = m.param_groups();
        for (((a, b), gi), grp) in m.params().iter().zip(before.params()).zip(&g).zip(groups) {
            let mult = if grp == crate::model::ParamGroup::Common { 1.0 } else { 10.0 };
            for ((&x, &x0), &gv) in a.data().iter().zip(b.data()).zip(gi.data()) {
                assert_eq!(x, x0 + (0.0 - lr * mult * gv));
            }
        }
    }

    #[test]
    fn momentum_matches_hand_recursion_on_quadratic() {
        // Loss 0.5 * |w|^2 has gradient w.
        let mut m = tiny_model();
        let mut opt = SgdMomentum::new(&m, 0.9, 1.0);
        let lr = 0.05;
        let w0: Vec<f64> = m.params().iter().flat_map(|p| p.data().to_vec()).collect();
        let g1 = fake_grads(&m, 1.0).iter().map(|t| t.map(|v| v - 0.25)).collect::<Vec<_>>();
        opt.step(&mut m, &g1, lr).unwrap();
        let w1: Vec<f64> = m.params().iter().flat_map(|p| p.data().to_vec()).collect();
        let g2: Vec<Tensor<f64>> = m.params().iter().map(|p| (*p).clone()).collect();
        opt.step(&mut m, &g2, lr).unwrap();
        let w2: Vec<f64> = m.params().iter().flat_map(|p| p.data().to_vec()).collect();
        for i in 0..w0.len() {
            let (g1v, g2v) = (w0[i], w1[i]);
            assert!((w1[i] - w0[i] - (-lr * g1v)).abs() < 1e-12);
            let want = -lr * g2v + 0.9 * (-lr * g1v);
            assert!((w2[i] - w1[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation_names_fields() {
        let c = TrainConfig {
            batch_size: 1,
            eta0: 0.0,
            momentum: 1.0,
            eval_every: 0,
            ..TrainConfig::default()
        };
        match c.validate() {
            Err(Error::Validation(errs)) => {
                for key in ["batch_size", "eta0", "momentum", "eval_every"] {
                    assert!(errs.iter().any(|e| e.contains(key)), "{key}: {errs:?}");
                }
            }
            other => panic!("{other:?}"),
        }
    }
}
