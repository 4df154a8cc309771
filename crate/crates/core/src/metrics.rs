//! Target-side evaluation records shared by the trainer log and the harness.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::MfsanModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub cls: f64,
    pub mmd: f64,
    pub disc: f64,
    pub total: f64,
}

/// Accuracy of every classifier alone and of the average vote.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_classifier_accuracy: Vec<f64>,
    pub average_vote_accuracy: f64,
    /// Fraction of samples on which at least two classifiers disagree.
    pub max_pairwise_disagreement_rate: f64,
}

impl Evaluation {
    /// `max_{i,j} |acc_i − acc_j|`.
    pub fn classifier_gap(&self) -> f64 {
        let acc = &self.per_classifier_accuracy;
        let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        if acc.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub progress: f64,
    pub lr: f64,
    pub lambda_eff: f64,
    pub gamma_eff: f64,
    pub loss: LossValues,
    /// Absent when the target has no evaluation labels.
    #[serde(flatten)]
    pub eval: Option<Evaluation>,
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Scores `model` on labeled rows.
pub fn evaluate<T: Scalar>(
    model: &MfsanModel<T>,
    features: &Tensor<f64>,
    labels: &[usize],
) -> Result<Evaluation> {
    if features.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "evaluation needs one label per row ({} rows, {} labels)",
            features.rows(),
            labels.len()
        )));
    }
    let pred = model.predict(&features.cast::<T>())?;
    let per_classifier_accuracy = pred
        .per_branch_labels
        .iter()
        .map(|p| accuracy(p, labels))
        .collect();
    let conflicts = (0..labels.len())
        .filter(|&i| {
            let first = pred.per_branch_labels[0][i];
            pred.per_branch_labels.iter().any(|p| p[i] != first)
        })
        .count();
    Ok(Evaluation {
        per_classifier_accuracy,
        average_vote_accuracy: accuracy(&pred.labels, labels),
        max_pairwise_disagreement_rate: conflicts as f64 / labels.len() as f64,
    })
}
