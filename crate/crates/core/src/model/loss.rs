use serde::{Deserialize, Serialize};

use super::{BoundModel, BranchOutput};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::kernels::{mmd, BandwidthMode, EstimatorKind};
use crate::scalar::Scalar;

/// Reduction of the classifier-discrepancy term over the class dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscReduction {
    #[default]
    MeanOverClasses,
    SumOverClasses,
}

/// Settings shared by the distribution-alignment and classifier-alignment terms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AlignmentConfig {
    pub kernel: BandwidthMode,
    pub estimator: EstimatorKind,
    pub disc_reduction: DiscReduction,
}

/// A labeled minibatch routed to one branch.
#[derive(Debug, Clone, Copy)]
pub struct SourceBatch<'a, T> {
    pub branch: usize,
    pub features: &'a Tensor<T>,
    pub labels: &'a [usize],
}

/// All loss components of one evaluation, kept for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown<'g, T> {
    pub cls: Var<'g, T>,
    pub mmd: Var<'g, T>,
    pub disc: Var<'g, T>,
    pub total: Var<'g, T>,
    pub effective_lambda: T,
    pub effective_gamma: T,
}

impl<T: Scalar> LossBreakdown<'_, T> {
    /// `(cls, mmd, disc, total)` as plain numbers.
    pub fn values(&self) -> (T, T, T, T) {
        (
            self.cls.item(),
            self.mmd.item(),
            self.disc.item(),
            self.total.item(),
        )
    }
}

fn one_hot<T: Scalar>(labels: &[usize], k: usize) -> Result<Tensor<T>> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Label {
                label: y,
                num_classes: k,
            });
        }
        t.data_mut()[i * k + y] = T::one();
    }
    Ok(t)
}

fn check_batch<T: Scalar>(b: &SourceBatch<'_, T>) -> Result<()> {
    if b.features.rows() != b.labels.len() {
        return Err(Error::Contract(format!(
            "batch has {} rows but {} labels",
            b.features.rows(),
            b.labels.len()
        )));
    }
    if b.labels.is_empty() {
        return Err(Error::InsufficientSamples("empty source batch".into()));
    }
    Ok(())
}

/// Mean cross-entropy of one branch output against labels.
fn cross_entropy<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    out: &BranchOutput<'g, T>,
    labels: &[usize],
) -> Result<Var<'g, T>> {
    let g = model.graph();
    let mask = g.constant(one_hot(labels, model.num_classes())?);
    let n = T::lit(labels.len() as f64);
    Ok(out
        .logits
        .log_softmax()?
        .mul(mask)?
        .sum()
        .mul_scalar(-T::one() / n))
}

fn zero<'g, T: Scalar>(model: &BoundModel<'g, T>) -> Var<'g, T> {
    model.graph().constant(Tensor::scalar(T::zero()))
}

fn sum_vars<'g, T: Scalar>(model: &BoundModel<'g, T>, vars: Vec<Var<'g, T>>) -> Result<Var<'g, T>> {
    let mut it = vars.into_iter();
    let Some(first) = it.next() else {
        return Ok(zero(model));
    };
    it.try_fold(first, |acc, v| acc.add(v))
}

struct SourceForward<'g, T> {
    out: BranchOutput<'g, T>,
}

fn forward_sources<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    batches: &[SourceBatch<'_, T>],
) -> Result<Vec<SourceForward<'g, T>>> {
    let g = model.graph();
    batches
        .iter()
        .map(|b| {
            check_batch(b)?;
            let f = model.common(g.constant(b.features.clone()))?;
            Ok(SourceForward {
                out: model.branch(b.branch, f)?,
            })
        })
        .collect()
}

fn cls_from<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    batches: &[SourceBatch<'_, T>],
    fwd: &[SourceForward<'g, T>],
) -> Result<Var<'g, T>> {
    let terms = batches
        .iter()
        .zip(fwd)
        .map(|(b, f)| cross_entropy(model, &f.out, b.labels))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(model, terms)
}

fn mmd_from<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    batches: &[SourceBatch<'_, T>],
    fwd: &[SourceForward<'g, T>],
    target: &[BranchOutput<'g, T>],
    cfg: &AlignmentConfig,
) -> Result<Var<'g, T>> {
    if batches.is_empty() {
        return Ok(zero(model));
    }
    let mut terms = Vec::with_capacity(batches.len());
    for (b, f) in batches.iter().zip(fwd) {
        let hs = f.out.features;
        let ht = target[b.branch].features;
        let spec = cfg.kernel.resolve(&hs.value(), &ht.value())?;
        terms.push(mmd(hs, ht, &spec, cfg.estimator)?.value);
    }
    let n = T::lit(terms.len() as f64);
    Ok(sum_vars(model, terms)?.mul_scalar(T::one() / n))
}

fn disc_from<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    target: &[BranchOutput<'g, T>],
    reduction: DiscReduction,
) -> Result<Var<'g, T>> {
    let nb = target.len();
    if nb < 2 {
        return Ok(zero(model));
    }
    let k = T::lit(model.num_classes() as f64);
    let mut terms = Vec::with_capacity(nb * (nb - 1) / 2);
    for j in 0..nb {
        for i in j + 1..nb {
            let mut d = target[i].probs.sub(target[j].probs)?.abs().mean();
            if reduction == DiscReduction::SumOverClasses {
                d = d.mul_scalar(k);
            }
            terms.push(d);
        }
    }
    let coef = T::lit(2.0 / (nb * (nb - 1)) as f64);
    Ok(sum_vars(model, terms)?.mul_scalar(coef))
}

/// Sum over batches of the mean cross-entropy of the batch's branch.
pub fn cls_loss<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    batches: &[SourceBatch<'_, T>],
) -> Result<Var<'g, T>> {
    let fwd = forward_sources(model, batches)?;
    cls_from(model, batches, &fwd)
}

/// Mean over batches of the MMD between the batch's branch features and the
/// same branch's features of the target batch.
pub fn mmd_loss<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    batches: &[SourceBatch<'_, T>],
    target: &Tensor<T>,
    cfg: &AlignmentConfig,
) -> Result<Var<'g, T>> {
    let fwd = forward_sources(model, batches)?;
    let tgt = model.forward_target(model.graph().constant(target.clone()))?;
    mmd_from(model, batches, &fwd, &tgt, cfg)
}

/// Pair-averaged mean absolute difference between branch probability outputs
/// on the target batch. Zero for a single branch.
pub fn disc_loss<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    target: &Tensor<T>,
    reduction: DiscReduction,
) -> Result<Var<'g, T>> {
    let tgt = model.forward_target(model.graph().constant(target.clone()))?;
    disc_from(model, &tgt, reduction)
}

/// `cls + lambda * mmd + gamma * disc`, sharing one forward pass per batch.
pub fn total_loss<'g, T: Scalar>(
    model: &BoundModel<'g, T>,
    batches: &[SourceBatch<'_, T>],
    target: &Tensor<T>,
    cfg: &AlignmentConfig,
    effective_lambda: T,
    effective_gamma: T,
) -> Result<LossBreakdown<'g, T>> {
    if effective_lambda < T::zero() || effective_gamma < T::zero() {
        return Err(Error::Contract("loss coefficients must be nonnegative".into()));
    }
    let fwd = forward_sources(model, batches)?;
    let tgt = model.forward_target(model.graph().constant(target.clone()))?;
    let cls = cls_from(model, batches, &fwd)?;
    let mmd = mmd_from(model, batches, &fwd, &tgt, cfg)?;
    let disc = disc_from(model, &tgt, cfg.disc_reduction)?;
    let total = cls
        .add(mmd.mul_scalar(effective_lambda))?
        .add(disc.mul_scalar(effective_gamma))?;
    Ok(LossBreakdown {
        cls,
        mmd,
        disc,
        total,
        effective_lambda,
        effective_gamma,
    })
}
