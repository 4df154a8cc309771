use serde::{Deserialize, Serialize};

use crate::data::{SamplerMode, TrainingView};
use crate::error::{Error, Result};
use crate::model::{AlignmentConfig, Architecture};

/// Which sources contribute to one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceMode {
    /// Source `iteration mod N` supplies the classification and MMD terms.
    #[default]
    RoundRobin,
    /// One minibatch from every source per iteration.
    AllSources,
}

/// Every knob of a training run. All defaults are materialized on
/// serialization so a printed config can be fed back verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub momentum: f64,
    pub theta: f64,
    pub lambda_base: f64,
    pub gamma_base: f64,
    /// Learning-rate multiplier of branch extractors and classifiers.
    pub lr_multiplier_scratch: f64,
    pub source_mode: SourceMode,
    pub alignment: AlignmentConfig,
    pub sampler_mode: SamplerMode,
    pub eval_every: usize,
    pub seed: u64,
    pub common_widths: Vec<usize>,
    pub branch_widths: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            theta: 10.0,
            lambda_base: 0.5,
            gamma_base: 0.5,
            lr_multiplier_scratch: 10.0,
            source_mode: SourceMode::RoundRobin,
            alignment: AlignmentConfig::default(),
            sampler_mode: SamplerMode::ShuffleEpoch,
            eval_every: 100,
            seed: 0,
            common_widths: vec![32],
            branch_widths: vec![32, 16],
        }
    }
}

impl TrainConfig {
    /// Lists every violated constraint.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size < 2 {
            errs.push(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        for (name, v) in [
            ("eta0", self.eta0),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("theta", self.theta),
            ("lr_multiplier_scratch", self.lr_multiplier_scratch),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errs.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        for (name, v) in [("lambda_base", self.lambda_base), ("gamma_base", self.gamma_base)] {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push(format!("{name} must be >= 0 and finite, got {v}"));
            }
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be >= 1".into());
        }
        if self.branch_widths.is_empty() {
            errs.push("branch_widths needs at least the feature width".into());
        }
        if self.common_widths.iter().chain(&self.branch_widths).any(|&w| w == 0) {
            errs.push("layer widths must be >= 1".into());
        }
        errs.extend(self.alignment.kernel.validate());
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Network shape for `num_branches` branches on the task of `view`.
    pub fn architecture(&self, view: &TrainingView<'_>, num_branches: usize) -> Architecture {
        Architecture {
            input_dim: view.feature_dim,
            common_widths: self.common_widths.clone(),
            branch_widths: self.branch_widths.clone(),
            num_classes: view.num_classes,
            num_sources: num_branches,
        }
    }
}
