#![allow(dead_code)]

use mfsan::autodiff::Tensor;
use mfsan::data::{generate_synthetic, MultiSourceTask, SyntheticSpec};
use mfsan::kernels::KernelSpec;
use mfsan::model::{Architecture, MfsanModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| r.random_range(lo..hi)).collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

pub fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut *r))
        .collect();
    Tensor::new(&[rows, cols], data).unwrap()
}

pub fn model(input: usize, hidden: usize, k: usize, n: usize, seed: u64) -> MfsanModel<f64> {
    let arch = Architecture {
        input_dim: input,
        common_widths: vec![hidden],
        branch_widths: vec![hidden, 4],
        num_classes: k,
        num_sources: n,
    };
    MfsanModel::new(arch, &mut rng(seed)).unwrap()
}

/// Random biases keep hidden pre-activations off the ReLU kink, which zero
/// biases would hit exactly on rows where every shared unit is inactive.
pub fn nudged_model(input: usize, hidden: usize, k: usize, n: usize, seed: u64) -> MfsanModel<f64> {
    let mut m = model(input, hidden, k, n, seed);
    let mut r = rng(seed ^ 0x5eed);
    for p in m.params_mut() {
        if p.shape().len() == 1 {
            for v in p.data_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    m
}

/// Same weights in every branch.
pub fn clone_branches(m: &mut MfsanModel<f64>) {
    let b0 = m.branch(0).clone();
    for j in 1..m.num_sources() {
        *m.branch_mut(j) = b0.clone();
    }
}

pub fn small_task(samples: usize, seed: u64) -> MultiSourceTask {
    let spec = SyntheticSpec {
        samples_per_domain: samples,
        seed,
        ..SyntheticSpec::desk_default()
    };
    generate_synthetic(&spec).unwrap()
}

/// `Σ_u w_u exp(-|a-b|² / (2 σ²_u))`, one pair at a time.
pub fn kernel_oracle(a: &[f64], b: &[f64], spec: &KernelSpec<f64>) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    spec.bandwidths()
        .iter()
        .zip(spec.weights())
        .map(|(s, w)| w * (-d2 / (2.0 * s)).exp())
        .sum()
}

pub fn mmd_biased_oracle(x: &Tensor<f64>, y: &Tensor<f64>, spec: &KernelSpec<f64>) -> f64 {
    let (n, m) = (x.rows(), y.rows());
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            kxx += kernel_oracle(x.row(i), x.row(j), spec);
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            kyy += kernel_oracle(y.row(i), y.row(j), spec);
        }
    }
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += kernel_oracle(x.row(i), y.row(j), spec);
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    kxx / (nf * nf) + kyy / (mf * mf) - 2.0 * kxy / (nf * mf)
}

pub fn mmd_unbiased_oracle(x: &Tensor<f64>, y: &Tensor<f64>, spec: &KernelSpec<f64>) -> f64 {
    let (n, m) = (x.rows(), y.rows());
    let mut kxx = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kxx += kernel_oracle(x.row(i), x.row(j), spec);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kyy += kernel_oracle(y.row(i), y.row(j), spec);
            }
        }
    }
    let mut kxy = 0.0;
    for i in 0..n {
        for j in 0..m {
            kxy += kernel_oracle(x.row(i), y.row(j), spec);
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    kxx / (nf * (nf - 1.0)) + kyy / (mf * (mf - 1.0)) - 2.0 * kxy / (nf * mf)
}

/// Pair-averaged mean absolute difference of probability rows.
pub fn disc_oracle(probs: &[Tensor<f64>]) -> f64 {
    let n = probs.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..i {
            let a = probs[i].data();
            let b = probs[j].data();
            total += a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64;
        }
    }
    2.0 * total / (n * (n - 1)) as f64
}
