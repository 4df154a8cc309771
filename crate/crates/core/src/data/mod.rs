//! Multi-source tasks: labeled source domains, an unlabeled target domain, and
//! target labels kept behind a separate evaluation accessor.

mod io;
mod sampler;
mod synthetic;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use io::{load_csv, load_manifest, write_csv, write_manifest, CsvDomain, Manifest};
pub use sampler::{BatchSampler, SamplerMode, SamplerState};
pub use synthetic::{desk_class_means, generate_synthetic, AffineTransform, SyntheticSpec};

/// Labeled sample matrix (`n × d`) with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDomain {
    features: Tensor<f64>,
    labels: Vec<usize>,
}

impl LabeledDomain {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = features.require_rank2("labeled domain")?;
        if n != labels.len() {
            return Err(Error::Contract(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        features.check_finite("domain features")?;
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows and labels at `idx`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f64>, Vec<usize>) {
        (
            self.features.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Sample matrix without labels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledDomain {
    features: Tensor<f64>,
}

impl UnlabeledDomain {
    pub fn new(features: Tensor<f64>) -> Result<Self> {
        features.require_rank2("unlabeled domain")?;
        features.check_finite("domain features")?;
        Ok(Self { features })
    }

    pub fn features(&self) -> &Tensor<f64> {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, idx: &[usize]) -> Tensor<f64> {
        self.features.gather_rows(idx)
    }
}

/// N labeled sources and one target whose labels are reachable only through
/// [`MultiSourceTask::target_labels_eval`].
#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceTask {
    sources: Vec<LabeledDomain>,
    target: UnlabeledDomain,
    target_labels_eval: Option<Vec<usize>>,
    num_classes: usize,
    feature_dim: usize,
}

/// Everything a trainer may read: source data and unlabeled target features.
#[derive(Debug, Clone, Copy)]
pub struct TrainingView<'a> {
    pub sources: &'a [LabeledDomain],
    pub target: &'a UnlabeledDomain,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl<'a> TrainingView<'a> {
    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }
}

impl MultiSourceTask {
    pub fn new(
        sources: Vec<LabeledDomain>,
        target: UnlabeledDomain,
        target_labels_eval: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut errs = Vec::new();
        if sources.is_empty() {
            errs.push("at least one source domain is required".to_string());
        }
        if num_classes < 2 {
            errs.push(format!("num_classes must be >= 2, got {num_classes}"));
        }
        let d = target.features().cols();
        for (j, s) in sources.iter().enumerate() {
            if s.features().cols() != d {
                errs.push(format!(
                    "source {j} has {} features, target has {d}",
                    s.features().cols()
                ));
            }
            if s.is_empty() {
                errs.push(format!("source {j} is empty"));
            }
            if let Some(&bad) = s.labels().iter().find(|&&y| y >= num_classes) {
                errs.push(format!("source {j} has label {bad} >= num_classes {num_classes}"));
            }
        }
        if target.is_empty() {
            errs.push("target domain is empty".to_string());
        }
        if let Some(labels) = &target_labels_eval {
            if labels.len() != target.len() {
                errs.push("target label count differs from target rows".to_string());
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
                errs.push(format!("target has label {bad} >= num_classes {num_classes}"));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        Ok(Self {
            sources,
            target,
            target_labels_eval,
            num_classes,
            feature_dim: d,
        })
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            sources: &self.sources,
            target: &self.target,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    /// Held-out target labels. Evaluation only.
    pub fn target_labels_eval(&self) -> Option<&[usize]> {
        self.target_labels_eval.as_deref()
    }

    pub fn sources(&self) -> &[LabeledDomain] {
        &self.sources
    }

    pub fn target(&self) -> &UnlabeledDomain {
        &self.target
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Keeps only the listed sources, in the given order.
    pub fn with_sources(&self, keep: &[usize]) -> Result<Self> {
        let sources = keep
            .iter()
            .map(|&j| {
                self.sources.get(j).cloned().ok_or(Error::Index {
                    what: "source",
                    index: j,
                    len: self.sources.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            sources,
            self.target.clone(),
            self.target_labels_eval.clone(),
            self.num_classes,
        )
    }
}
