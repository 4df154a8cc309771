use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{LabeledDomain, MultiSourceTask, UnlabeledDomain};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// `x ↦ scale · R(rotation) · x + translation`. The rotation turns every plane
/// listed in [`SyntheticSpec::rotation_planes`] by the same angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    #[serde(default = "one")]
    pub scale: f64,
    /// Empty means no translation.
    #[serde(default)]
    pub translation: Vec<f64>,
}

fn one() -> f64 {
    1.0
}

impl AffineTransform {
    pub fn rotation(deg: f64) -> Self {
        Self {
            rotation_deg: deg,
            scale: 1.0,
            translation: Vec::new(),
        }
    }

    pub fn identity() -> Self {
        Self::rotation(0.0)
    }

    pub fn apply(&self, x: &mut [f64], planes: &[[usize; 2]]) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        for &[a, b] in planes {
            let (xa, xb) = (x[a], x[b]);
            x[a] = c * xa - s * xb;
            x[b] = s * xa + c * xb;
        }
        for v in x.iter_mut() {
            *v *= self.scale;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

/// Class-conditional Gaussians shared by all domains, moved per domain by an
/// affine map. The last transform belongs to the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// `num_classes × feature_dim`.
    pub class_means: Vec<Vec<f64>>,
    pub class_cov_scale: f64,
    pub domain_transforms: Vec<AffineTransform>,
    pub rotation_planes: Vec<[usize; 2]>,
    pub samples_per_domain: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl SyntheticSpec {
    /// Two sources rotated by 0° and 25°, target rotated by 50°; K = 4, d = 8,
    /// 400 samples per domain.
    pub fn desk_default() -> Self {
        let (k, d) = (4, 8);
        Self {
            num_classes: k,
            feature_dim: d,
            class_means: desk_class_means(k, d),
            class_cov_scale: 0.5,
            domain_transforms: vec![
                AffineTransform::rotation(0.0),
                AffineTransform::rotation(25.0),
                AffineTransform::rotation(50.0),
            ],
            rotation_planes: vec![[0, 1]],
            samples_per_domain: 400,
            noise_std: 0.1,
            seed: 0,
        }
    }

    /// Same class structure with every transform set to the identity.
    pub fn without_shift(mut self) -> Self {
        for t in &mut self.domain_transforms {
            *t = AffineTransform::identity();
        }
        self
    }

    pub fn num_sources(&self) -> usize {
        self.domain_transforms.len().saturating_sub(1)
    }

    /// Lists every violated constraint, naming the field.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.num_classes < 2 {
            errs.push(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.feature_dim == 0 {
            errs.push("feature_dim must be >= 1".to_string());
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.feature_dim)
        {
            errs.push(format!(
                "class_means must be {} x {}",
                self.num_classes, self.feature_dim
            ));
        }
        if self.class_means.iter().flatten().any(|v| !v.is_finite()) {
            errs.push("class_means must be finite".to_string());
        }
        if !(self.class_cov_scale > 0.0) || !self.class_cov_scale.is_finite() {
            errs.push("class_cov_scale must be positive".to_string());
        }
        if self.domain_transforms.len() < 2 {
            errs.push("domain_transforms needs at least one source and the target".to_string());
        }
        for (i, t) in self.domain_transforms.iter().enumerate() {
            if t.scale == 0.0 || !t.scale.is_finite() {
                errs.push(format!("domain_transforms[{i}].scale must be nonzero"));
            }
            if !t.translation.is_empty() && t.translation.len() != self.feature_dim {
                errs.push(format!(
                    "domain_transforms[{i}].translation must have {} entries",
                    self.feature_dim
                ));
            }
        }
        for p in &self.rotation_planes {
            if p[0] == p[1] || p[0] >= self.feature_dim || p[1] >= self.feature_dim {
                errs.push(format!("rotation plane {p:?} invalid for dimension {}", self.feature_dim));
            }
        }
        if self.samples_per_domain < self.num_classes {
            errs.push(format!(
                "samples_per_domain must be >= num_classes ({})",
                self.num_classes
            ));
        }
        if !(self.noise_std >= 0.0) {
            errs.push("noise_std must be >= 0".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }

    /// Number of samples of each class in one domain: an even split with the
    /// remainder going to the lowest class indices.
    pub fn class_counts(&self) -> Vec<usize> {
        let (q, r) = (
            self.samples_per_domain / self.num_classes,
            self.samples_per_domain % self.num_classes,
        );
        (0..self.num_classes).map(|c| q + usize::from(c < r)).collect()
    }
}

/// Strong class signal on a circle in the first two coordinates, weaker
/// ±0.6 codes on the remaining ones.
pub fn desk_class_means(k: usize, d: usize) -> Vec<Vec<f64>> {
    const RADIUS: f64 = 3.0;
    const CODE: f64 = 0.6;
    let bits = usize::BITS - (k.max(2) - 1).leading_zeros();
    (0..k)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / k as f64;
            let mut m = vec![0.0; d];
            if d >= 2 {
                m[0] = RADIUS * angle.cos();
                m[1] = RADIUS * angle.sin();
            }
            for (i, v) in m.iter_mut().enumerate().skip(2) {
                let bit = (i - 2) % bits as usize;
                *v = if (c >> bit) & 1 == 1 { CODE } else { -CODE };
            }
            m
        })
        .collect()
}

fn sample_domain(
    spec: &SyntheticSpec,
    transform: &AffineTransform,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Vec<usize>) {
    let d = spec.feature_dim;
    let sd = spec.class_cov_scale.sqrt();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(spec.samples_per_domain);
    for (c, &count) in spec.class_counts().iter().enumerate() {
        for _ in 0..count {
            let mut x: Vec<f64> = spec.class_means[c]
                .iter()
                .map(|&m| {
                    let z: f64 = StandardNormal.sample(rng);
                    m + sd * z
                })
                .collect();
            transform.apply(&mut x, &spec.rotation_planes);
            if spec.noise_std > 0.0 {
                for v in &mut x {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += spec.noise_std * z;
                }
            }
            rows.push((x, c));
        }
    }
    rows.shuffle(rng);
    let labels = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    (
        Tensor::new(&[spec.samples_per_domain, d], data).expect("generated shape"),
        labels,
    )
}

/// Draws every domain from one seeded stream: sources in order, then the target.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiSourceTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_sources();
    let mut sources = Vec::with_capacity(n);
    for t in &spec.domain_transforms[..n] {
        let (x, y) = sample_domain(spec, t, &mut rng);
        sources.push(LabeledDomain::new(x, y)?);
    }
    let (xt, yt) = sample_domain(spec, &spec.domain_transforms[n], &mut rng);
    MultiSourceTask::new(
        sources,
        UnlabeledDomain::new(xt)?,
        Some(yt),
        spec.num_classes,
    )
}
