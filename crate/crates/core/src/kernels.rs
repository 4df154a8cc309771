//! Gaussian-kernel Gram matrices and differentiable MMD estimators.
//!
//! The kernel is a mixture `k(x, y) = Σ_u w_u · exp(-‖x - y‖² / (2σ²_u))`.
//! Two estimators of the squared MMD are provided:
//!
//! * [`mmd_biased`]: squared distance between empirical mean embeddings,
//!   `mean K(x,x) - 2 mean K(x,y) + mean K(y,y)`, diagonal terms included.
//!   Nonnegative up to rounding.
//! * [`mmd_unbiased`]: the U-statistic with the diagonal removed from the
//!   within-sample terms. Can be negative.
//!
//! Other alignment losses (CORAL, adversarial) can be added alongside these by
//! producing a scalar [`Var`] from two feature batches.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Resolved kernel mixture: positive `σ²` values and weights summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec<T> {
    bandwidths: Vec<T>,
    weights: Vec<T>,
}

impl<T: Scalar> KernelSpec<T> {
    pub fn new(bandwidths: Vec<T>, weights: Vec<T>) -> Result<Self> {
        let mut errs = Vec::new();
        if bandwidths.is_empty() {
            errs.push("kernel needs at least one bandwidth".to_string());
        }
        if bandwidths.len() != weights.len() {
            errs.push(format!(
                "{} bandwidths but {} weights",
                bandwidths.len(),
                weights.len()
            ));
        }
        if bandwidths.iter().any(|b| !(*b > T::zero()) || !b.is_finite()) {
            errs.push("bandwidths must be positive and finite".to_string());
        }
        if weights.iter().any(|w| *w < T::zero() || !w.is_finite()) {
            errs.push("weights must be nonnegative".to_string());
        }
        let total: f64 = weights.iter().map(|w| w.as_f64()).sum();
        let slack = (4 * weights.len()) as f64 * T::epsilon().as_f64();
        if !weights.is_empty() && (total - 1.0).abs() > slack.max(1e-12) {
            errs.push(format!("weights sum to {total}, expected 1"));
        }
        if errs.is_empty() {
            Ok(Self {
                bandwidths,
                weights,
            })
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Single Gaussian with variance parameter `sigma2`.
    pub fn single(sigma2: T) -> Result<Self> {
        Self::new(vec![sigma2], vec![T::one()])
    }

    /// Equal-weight mixture over `bandwidths`.
    pub fn uniform(bandwidths: Vec<T>) -> Result<Self> {
        let w = T::one() / T::lit(bandwidths.len().max(1) as f64);
        let weights = vec![w; bandwidths.len()];
        Self::new(bandwidths, weights)
    }

    pub fn bandwidths(&self) -> &[T] {
        &self.bandwidths
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn total_weight(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

/// How bandwidths are chosen for each pair of feature batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BandwidthMode {
    /// Fixed mixture, uniform weights.
    Fixed { bandwidths: Vec<f64> },
    /// Ladder around the median pairwise squared distance of the pooled batch.
    MedianHeuristic {
        ladder_size: usize,
        step_multiplier: f64,
    },
}

impl Default for BandwidthMode {
    fn default() -> Self {
        BandwidthMode::MedianHeuristic {
            ladder_size: 5,
            step_multiplier: 2.0,
        }
    }
}

impl BandwidthMode {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match self {
            BandwidthMode::Fixed { bandwidths } => {
                if bandwidths.is_empty() || bandwidths.iter().any(|b| !(*b > 0.0)) {
                    errs.push("kernel.bandwidths must be a nonempty list of positive values".into());
                }
            }
            BandwidthMode::MedianHeuristic {
                ladder_size,
                step_multiplier,
            } => {
                if *ladder_size < 1 {
                    errs.push("kernel.ladder_size must be >= 1".into());
                }
                if !(*step_multiplier > 1.0) {
                    errs.push("kernel.step_multiplier must be > 1".into());
                }
            }
        }
        errs
    }

    /// Kernel for comparing `x` with `y`. Bandwidths are computed from values
    /// only, so no gradient flows through their selection.
    pub fn resolve<T: Scalar>(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<KernelSpec<T>> {
        match self {
            BandwidthMode::Fixed { bandwidths } => {
                KernelSpec::uniform(bandwidths.iter().map(|&b| T::lit(b)).collect())
            }
            BandwidthMode::MedianHeuristic {
                ladder_size,
                step_multiplier,
            } => median_heuristic(x, y, *ladder_size, *step_multiplier),
        }
    }
}

/// Median of the pairwise squared distances over the pooled rows of `x` and `y`
/// (self-pairs excluded), expanded into a geometric ladder
/// `base · s^(i - ⌈L/2⌉)` for `i = 1..=L` with uniform weights.
///
/// When more than half of the pairs coincide the median would be zero; the
/// median of the strictly positive distances is used instead.
pub fn median_heuristic<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    ladder_size: usize,
    step_multiplier: f64,
) -> Result<KernelSpec<T>> {
    let errs = BandwidthMode::MedianHeuristic {
        ladder_size,
        step_multiplier,
    }
    .validate();
    if !errs.is_empty() {
        return Err(Error::Validation(errs));
    }
    let (n, d) = x.require_rank2("median_heuristic")?;
    let (m, d2) = y.require_rank2("median_heuristic")?;
    if d != d2 {
        return Err(Error::shape("median_heuristic", x.shape(), y.shape()));
    }
    if n + m < 2 {
        return Err(Error::InsufficientSamples(
            "median heuristic needs at least two pooled points".into(),
        ));
    }
    let rows: Vec<&[T]> = (0..n).map(|i| x.row(i)).chain((0..m).map(|j| y.row(j))).collect();
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let s: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(&a, &b)| {
                    let t = (a - b).as_f64();
                    t * t
                })
                .sum();
            dists.push(s);
        }
    }
    let mut base = median(&mut dists);
    if !(base > 0.0) {
        let mut positive: Vec<f64> = dists.into_iter().filter(|&v| v > 0.0).collect();
        if positive.is_empty() {
            return Err(Error::DegenerateData(
                "all pairwise distances are zero".into(),
            ));
        }
        base = median(&mut positive);
    }
    let center = ladder_size.div_ceil(2) as i32;
    let bandwidths: Vec<T> = (1..=ladder_size as i32)
        .map(|i| T::lit(base * step_multiplier.powi(i - center)))
        .collect();
    if bandwidths.iter().any(|b| !b.is_finite() || !(*b > T::zero())) {
        return Err(Error::NonFinite(format!(
            "median heuristic bandwidth from median squared distance {base:e}"
        )));
    }
    KernelSpec::uniform(bandwidths)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Differentiable Gram matrix `K[i][j] = Σ_u w_u exp(-‖x_i - y_j‖² / (2σ²_u))`.
pub fn gram<'g, T: Scalar>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    spec: &KernelSpec<T>,
) -> Result<Var<'g, T>> {
    let d2 = x.sq_dist(y)?;
    let mut acc: Option<Var<'g, T>> = None;
    for (&bw, &w) in spec.bandwidths.iter().zip(&spec.weights) {
        let k = d2.mul_scalar(-T::one() / (T::lit(2.0) * bw)).exp().mul_scalar(w);
        acc = Some(match acc {
            None => k,
            Some(a) => a.add(k)?,
        });
    }
    Ok(acc.expect("kernel spec is nonempty"))
}

/// Plain Gram matrix on values.
pub fn gram_values<T: Scalar>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    spec: &KernelSpec<T>,
) -> Result<Tensor<T>> {
    let g = Graph::new();
    let k = gram(g.constant(x.clone()), g.constant(y.clone()), spec)?;
    let out = k.value();
    Ok((*out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// V-statistic: squared distance between empirical mean embeddings.
    #[default]
    BiasedV,
    /// U-statistic: within-sample diagonal terms removed.
    UnbiasedU,
}

#[derive(Debug, Clone, Copy)]
pub struct MmdEstimate<'g, T> {
    pub value: Var<'g, T>,
    pub estimator_kind: EstimatorKind,
    pub sample_sizes: (usize, usize),
}

fn check_pair<T: Scalar>(x: Var<'_, T>, y: Var<'_, T>, min: usize) -> Result<(usize, usize)> {
    let (xs, ys) = (x.value(), y.value());
    let (n, d) = xs.require_rank2("mmd")?;
    let (m, d2) = ys.require_rank2("mmd")?;
    if d != d2 {
        return Err(Error::shape("mmd", xs.shape(), ys.shape()));
    }
    if n < min || m < min {
        return Err(Error::InsufficientSamples(format!(
            "estimator needs at least {min} samples per side, got ({n}, {m})"
        )));
    }
    Ok((n, m))
}

/// `mean K(x,x) - 2 mean K(x,y) + mean K(y,y)`.
pub fn mmd_biased<'g, T: Scalar>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    spec: &KernelSpec<T>,
) -> Result<MmdEstimate<'g, T>> {
    let sizes = check_pair(x, y, 1)?;
    let kxx = gram(x, x, spec)?.mean();
    let kyy = gram(y, y, spec)?.mean();
    let kxy = gram(x, y, spec)?.mean();
    let value = kxx.add(kyy)?.sub(kxy.mul_scalar(T::lit(2.0)))?;
    Ok(MmdEstimate {
        value,
        estimator_kind: EstimatorKind::BiasedV,
        sample_sizes: sizes,
    })
}

/// Unbiased U-statistic estimate of the squared MMD.
pub fn mmd_unbiased<'g, T: Scalar>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    spec: &KernelSpec<T>,
) -> Result<MmdEstimate<'g, T>> {
    let (n, m) = check_pair(x, y, 2)?;
    let g = x.graph();
    let off_diag = |k: usize| {
        let mut mask = Tensor::ones(&[k, k]);
        for i in 0..k {
            mask.data_mut()[i * k + i] = T::zero();
        }
        g.constant(mask)
    };
    let kxx = gram(x, x, spec)?.mul(off_diag(n))?.sum();
    let kyy = gram(y, y, spec)?.mul(off_diag(m))?.sum();
    let kxy = gram(x, y, spec)?.sum();
    let nf = T::lit(n as f64);
    let mf = T::lit(m as f64);
    let value = kxx
        .mul_scalar(T::one() / (nf * (nf - T::one())))
        .add(kyy.mul_scalar(T::one() / (mf * (mf - T::one()))))?
        .sub(kxy.mul_scalar(T::lit(2.0) / (nf * mf)))?;
    Ok(MmdEstimate {
        value,
        estimator_kind: EstimatorKind::UnbiasedU,
        sample_sizes: (n, m),
    })
}

pub fn mmd<'g, T: Scalar>(
    x: Var<'g, T>,
    y: Var<'g, T>,
    spec: &KernelSpec<T>,
    kind: EstimatorKind,
) -> Result<MmdEstimate<'g, T>> {
    match kind {
        EstimatorKind::BiasedV => mmd_biased(x, y, spec),
        EstimatorKind::UnbiasedU => mmd_unbiased(x, y, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn overflowing_distances_are_numeric_errors() {
        let x = Tensor::new(&[2, 1], vec![1e200, -1e200]).unwrap();
        let y = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
        assert!(matches!(median_heuristic(&x, &y, 3, 2.0), Err(Error::NonFinite(_))));
        let x32 = Tensor::new(&[2, 1], vec![1e30f32, -1e30]).unwrap();
        let y32 = Tensor::new(&[2, 1], vec![0.0f32, 1.0]).unwrap();
        assert!(matches!(median_heuristic(&x32, &y32, 3, 2.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn uniform_mixture_accepted_in_single_precision() {
        for l in 1..=9 {
            let b: Vec<f32> = (1..=l).map(|i| i as f32).collect();
            assert!(KernelSpec::uniform(b).is_ok(), "L = {l}");
        }
    }

    #[test]
    fn gram_single_pair_value() {
        let spec = KernelSpec::single(0.5).unwrap();
        let k = gram_values(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[1.0]), &spec).unwrap();
        assert!((k.item() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k.item() - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn gram_diagonal_is_one_and_transpose_symmetric() {
        let x = t(&[3, 2], &[0.1, 0.4, -1.0, 2.0, 3.3, 0.0]);
        let y = t(&[2, 2], &[1.0, 1.0, -0.5, 0.25]);
        let spec = KernelSpec::single(1.7).unwrap();
        let kxx = gram_values(&x, &x, &spec).unwrap();
        for i in 0..3 {
            assert_eq!(kxx.get2(i, i), 1.0);
        }
        let kxy = gram_values(&x, &y, &spec).unwrap();
        let kyx = gram_values(&y, &x, &spec).unwrap();
        assert_eq!(kxy, kyx.transpose());
    }

    #[test]
    fn gram_dimension_mismatch() {
        let g = Graph::new();
        let spec = KernelSpec::single(1.0).unwrap();
        let r = gram(
            g.constant(Tensor::<f64>::zeros(&[2, 3])),
            g.constant(Tensor::zeros(&[2, 2])),
            &spec,
        );
        assert!(matches!(r, Err(Error::Shape { .. })));
    }

    #[test]
    fn kernel_spec_validation() {
        assert!(KernelSpec::<f64>::new(vec![], vec![]).is_err());
        assert!(KernelSpec::new(vec![1.0, -1.0], vec![0.5, 0.5]).is_err());
        assert!(KernelSpec::new(vec![1.0, 2.0], vec![0.6, 0.6]).is_err());
        assert!(KernelSpec::new(vec![1.0, 2.0], vec![0.25, 0.75]).is_ok());
        assert!(KernelSpec::uniform(vec![1.0; 7]).is_ok());
    }

    #[test]
    fn median_two_points() {
        let spec = median_heuristic(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[2.0]), 1, 2.0).unwrap();
        assert_eq!(spec.bandwidths(), &[4.0]);
        assert_eq!(spec.weights(), &[1.0]);
    }

    #[test]
    fn median_ladder_of_five() {
        let spec = median_heuristic(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[2.0]), 5, 2.0).unwrap();
        assert_eq!(spec.bandwidths(), &[1.0, 2.0, 4.0, 8.0, 16.0]);
        assert!(spec.weights().iter().all(|&w| w == 0.2));
    }

    #[test]
    fn median_brute_force_on_pooled_sample() {
        // pooled 1-D points {0, 1, 3}: squared distances {1, 9, 4} -> median 4
        let spec = median_heuristic(&t(&[2, 1], &[0.0, 1.0]), &t(&[1, 1], &[3.0]), 1, 2.0).unwrap();
        assert_eq!(spec.bandwidths(), &[4.0]);
    }

    #[test]
    fn median_degenerate_and_invalid() {
        let z = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            median_heuristic(&z, &z, 3, 2.0),
            Err(Error::DegenerateData(_))
        ));
        assert!(median_heuristic(&z, &z, 0, 2.0).is_err());
        assert!(median_heuristic(&z, &z, 3, 1.0).is_err());
    }

    #[test]
    fn biased_single_pair_value() {
        let g = Graph::new();
        let spec = KernelSpec::single(0.5).unwrap();
        let est = mmd_biased(
            g.constant(t(&[1, 1], &[0.0])),
            g.constant(t(&[1, 1], &[1.0])),
            &spec,
        )
        .unwrap();
        let expected = 2.0 - 2.0 * (-1.0f64).exp();
        assert!((est.value.item() - expected).abs() < 1e-15);
        assert!((est.value.item() - 1.264241).abs() < 1e-6);
        assert_eq!(est.sample_sizes, (1, 1));
    }

    #[test]
    fn biased_identical_samples_is_zero() {
        let g = Graph::new();
        let x = g.constant(t(&[3, 2], &[0.3, 1.0, -2.0, 0.5, 4.0, 4.0]));
        let spec = KernelSpec::uniform(vec![0.5, 1.0, 2.0]).unwrap();
        assert!(mmd_biased(x, x, &spec).unwrap().value.item().abs() < 1e-12);
    }

    #[test]
    fn unbiased_needs_two_per_side() {
        let g = Graph::new();
        let spec = KernelSpec::single(1.0).unwrap();
        let r = mmd_unbiased(
            g.constant(t(&[1, 1], &[0.0])),
            g.constant(t(&[3, 1], &[0.0, 1.0, 2.0])),
            &spec,
        );
        assert!(matches!(r, Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn unbiased_duplicate_rows_within_term_is_one() {
        // x has two identical rows so its within term is k(x1, x2) = 1
        let g = Graph::new();
        let spec = KernelSpec::single(0.8).unwrap();
        let xv = t(&[2, 1], &[0.5, 0.5]);
        let yv = t(&[2, 1], &[0.0, 1.0]);
        let est = mmd_unbiased(g.constant(xv.clone()), g.constant(yv.clone()), &spec).unwrap();
        let k = |a: f64, b: f64| (-(a - b) * (a - b) / 1.6).exp();
        let within_y = k(0.0, 1.0);
        let cross = (k(0.5, 0.0) + k(0.5, 1.0) + k(0.5, 0.0) + k(0.5, 1.0)) * 2.0 / 4.0;
        assert!((est.value.item() - (1.0 + within_y - cross)).abs() < 1e-14);
    }
}
