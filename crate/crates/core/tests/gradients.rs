mod common;

use common::{nudged_model as model, normal, rng, uniform};
use mfsan::autodiff::{check_gradients, Graph, Tensor, Var};
use mfsan::kernels::{mmd, BandwidthMode, EstimatorKind, KernelSpec};
use mfsan::model::{
    cls_loss, disc_loss, mmd_loss, total_loss, AlignmentConfig, DiscReduction, MfsanModel,
    SourceBatch,
};
use mfsan::Result;
use rand::Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn fixed_alignment(estimator: EstimatorKind) -> AlignmentConfig {
    AlignmentConfig {
        kernel: BandwidthMode::Fixed {
            bandwidths: vec![0.25, 1.0, 4.0],
        },
        estimator,
        disc_reduction: DiscReduction::MeanOverClasses,
    }
}

struct Batches {
    xs: Vec<Tensor<f64>>,
    ys: Vec<Vec<usize>>,
    target: Tensor<f64>,
}

impl Batches {
    fn draw(n: usize, k: usize, d: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let xs = (0..n).map(|_| normal(&mut r, 5, d)).collect();
        let ys = (0..n)
            .map(|_| (0..5).map(|i| (i + r.random_range(0..k)) % k).collect())
            .collect();
        Self {
            xs,
            ys,
            target: normal(&mut r, 6, d),
        }
    }

    fn source(&self) -> Vec<SourceBatch<'_, f64>> {
        self.xs
            .iter()
            .zip(&self.ys)
            .enumerate()
            .map(|(j, (x, y))| SourceBatch {
                branch: j,
                features: x,
                labels: y,
            })
            .collect()
    }
}

fn params(m: &MfsanModel<f64>) -> Vec<Tensor<f64>> {
    m.params().into_iter().cloned().collect()
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Cls,
    Mmd,
    Disc,
    Total,
}

fn term_loss<'g>(
    m: &MfsanModel<f64>,
    b: &Batches,
    cfg: &AlignmentConfig,
    term: Term,
    g: &'g Graph<f64>,
    vars: &[Var<'g, f64>],
) -> Result<Var<'g, f64>> {
    let bound = m.bind_vars(g, vars)?;
    let src = b.source();
    match term {
        Term::Cls => cls_loss(&bound, &src),
        Term::Mmd => mmd_loss(&bound, &src, &b.target, cfg),
        Term::Disc => disc_loss(&bound, &b.target, cfg.disc_reduction),
        Term::Total => Ok(total_loss(&bound, &src, &b.target, cfg, 0.7, 0.3)?.total),
    }
}

#[test]
fn loss_gradients_over_config_matrix() {
    let d = 3;
    let mut worst = 0.0f64;
    for n in [1, 2, 3] {
        for k in [2, 4] {
            for hidden in [3, 8] {
                let seed = (n * 100 + k * 10 + hidden) as u64;
                let m = model(d, hidden, k, n, seed);
                let b = Batches::draw(n, k, d, seed + 1);
                for est in [EstimatorKind::BiasedV, EstimatorKind::UnbiasedU] {
                    let cfg = fixed_alignment(est);
                    for term in [Term::Cls, Term::Mmd, Term::Disc, Term::Total] {
                        let report = check_gradients(
                            |g, v| term_loss(&m, &b, &cfg, term, g, v),
                            &params(&m),
                            STEP,
                            TOL,
                        )
                        .unwrap();
                        worst = worst.max(report.max_rel_err());
                        assert!(
                            report.passed(),
                            "N={n} K={k} hidden={hidden} {est:?} {term:?}: {:?}",
                            report.params
                        );
                    }
                }
            }
        }
    }
    assert!(worst < TOL);
}

#[test]
fn toy_network_total_loss() {
    let m = model(2, 4, 2, 2, 11);
    let b = Batches::draw(2, 2, 2, 12);
    let cfg = fixed_alignment(EstimatorKind::BiasedV);
    let report = check_gradients(
        |g, v| term_loss(&m, &b, &cfg, Term::Total, g, v),
        &params(&m),
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{:?}", report.params);
}

#[test]
fn zero_coefficients_reduce_total_to_cls() {
    let m = model(3, 8, 4, 3, 5);
    let b = Batches::draw(3, 4, 3, 6);
    let cfg = fixed_alignment(EstimatorKind::BiasedV);
    let grads = |total: bool| {
        let g = Graph::new();
        let bound = m.bind(&g);
        let src = b.source();
        let loss = if total {
            total_loss(&bound, &src, &b.target, &cfg, 0.0, 0.0).unwrap().total
        } else {
            cls_loss(&bound, &src).unwrap()
        };
        let gr = g.backward(loss).unwrap();
        bound
            .param_vars()
            .iter()
            .map(|&v| gr.get_or_zeros(v))
            .collect::<Vec<_>>()
    };
    let (a, c) = (grads(true), grads(false));
    for (x, y) in a.iter().zip(&c) {
        assert!(x.max_abs_diff(y) < 1e-12);
    }
}

#[test]
fn mmd_input_gradients() {
    let mut r = rng(21);
    for est in [EstimatorKind::BiasedV, EstimatorKind::UnbiasedU] {
        for trial in 0..10 {
            let n = 2 + trial % 5;
            let m = 2 + (trial * 3) % 6;
            let d = 1 + trial % 4;
            let x = normal(&mut r, n, d);
            let y = normal(&mut r, m, d);
            let spec = KernelSpec::uniform(vec![0.5, 2.0]).unwrap();
            let report = check_gradients(
                |_, v| Ok(mmd(v[0], v[1], &spec, est)?.value),
                &[x, y],
                STEP,
                TOL,
            )
            .unwrap();
            assert!(report.passed(), "{est:?} trial {trial}: {:?}", report.params);
        }
    }
}

type OpFn = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

fn ops() -> Vec<(&'static str, usize, OpFn)> {
    vec![
        ("add", 2, |_, v| Ok(v[0].add(v[1])?.mul(v[0])?.sum())),
        ("sub", 2, |_, v| Ok(v[0].sub(v[1])?.exp().sum())),
        ("mul", 2, |_, v| Ok(v[0].mul(v[1])?.sum())),
        ("mul_scalar", 1, |_, v| Ok(v[0].mul_scalar(-1.7).exp().mean())),
        ("add_scalar", 1, |_, v| Ok(v[0].add_scalar(0.3).mul(v[0])?.sum())),
        ("neg", 1, |_, v| Ok(v[0].neg().exp().sum())),
        ("exp", 1, |_, v| Ok(v[0].exp().sum())),
        ("log", 1, |_, v| Ok(v[0].mul(v[0])?.add_scalar(0.5).log()?.sum())),
        ("abs", 1, |_, v| Ok(v[0].abs().mul(v[0])?.sum())),
        ("relu", 1, |_, v| Ok(v[0].relu().mul(v[0])?.sum())),
        ("mean", 1, |_, v| Ok(v[0].mul(v[0])?.mean())),
        ("softmax", 1, |g, v| {
            let w = g.constant(Tensor::from_f64(&v[0].shape(), &weights(v[0].value().len())).unwrap());
            Ok(v[0].softmax()?.mul(w)?.sum())
        }),
        ("log_softmax", 1, |g, v| {
            let w = g.constant(Tensor::from_f64(&v[0].shape(), &weights(v[0].value().len())).unwrap());
            Ok(v[0].log_softmax()?.mul(w)?.sum())
        }),
    ]
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect()
}

/// Entries drawn away from zero so abs and relu never straddle their kink.
fn away_from_zero(r: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = uniform(r, rows, cols, 0.05, 1.5);
    for v in t.data_mut() {
        if r.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

#[test]
fn elementwise_and_reduction_ops_random_trials() {
    let mut r = rng(99);
    let table = ops();
    for trial in 0..100 {
        let (name, arity, f) = table[trial % table.len()];
        let rows = r.random_range(1..5);
        let cols = r.random_range(2..5);
        let inputs: Vec<_> = (0..arity)
            .map(|_| away_from_zero(&mut r, rows, cols))
            .collect();
        let report = check_gradients(f, &inputs, STEP, TOL).unwrap();
        assert!(report.passed(), "{name} trial {trial}: {:?}", report.params);
    }
}

#[test]
fn matmul_and_softmax_tight() {
    let mut r = rng(3);
    let a = normal(&mut r, 4, 5);
    let b = normal(&mut r, 5, 3);
    let w = normal(&mut r, 4, 3);
    let rep = check_gradients(
        |g, v| Ok(v[0].matmul(v[1])?.mul(g.constant(w.clone()))?.sum()),
        &[a, b],
        STEP,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{:?}", rep.params);

    let s = normal(&mut r, 3, 5);
    let w = normal(&mut r, 3, 5);
    let rep = check_gradients(
        |g, v| Ok(v[0].softmax()?.mul(g.constant(w.clone()))?.sum()),
        &[s],
        STEP,
        1e-6,
    )
    .unwrap();
    assert!(rep.passed(), "{:?}", rep.params);
}

#[test]
fn sq_dist_gradients() {
    let mut r = rng(8);
    let x = normal(&mut r, 4, 3);
    let y = normal(&mut r, 5, 3);
    let rep = check_gradients(
        |_, v| Ok(v[0].sq_dist(v[1])?.mul_scalar(-0.3).exp().sum()),
        &[x, y],
        STEP,
        TOL,
    )
    .unwrap();
    assert!(rep.passed(), "{:?}", rep.params);
}

#[test]
fn shared_leaf_paths_accumulate() {
    // f(x) = sum(x * x + exp(x)), df/dx = 2x + exp(x)
    let x: Tensor<f64> = Tensor::from_f64(&[2, 2], &[0.1, -0.4, 1.2, 0.7]).unwrap();
    let g = Graph::new();
    let v = g.param(x.clone());
    let loss = v.mul(v).unwrap().add(v.exp()).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    let got = grads.get(v).unwrap();
    for (gi, xi) in got.data().iter().zip(x.data()) {
        assert!((gi - (2.0 * xi + xi.exp())).abs() < 1e-14);
    }
}
