mod common;

use common::{nudged_model, small_task};
use mfsan::autodiff::{Graph, Tensor};
use mfsan::data::{generate_synthetic, SyntheticSpec};
use mfsan::harness::{run_seed, Method};
use mfsan::metrics::evaluate;
use mfsan::model::{cls_loss, SourceBatch};
use mfsan::trainer::{SgdMomentum, TrainConfig};
use mfsan::{Model, Trainer};

fn short(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        eval_every: 50,
        ..TrainConfig::default()
    }
}

fn same_bits(a: &Model, b: &Model) -> bool {
    a.params()
        .iter()
        .zip(b.params())
        .all(|(x, y)| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[test]
fn full_batch_descent_reduces_cls_on_separable_data() {
    // two classes split by the sign of the first coordinate
    let rows: Vec<[f64; 2]> = (0..16)
        .map(|i| {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            [s * (1.0 + 0.1 * i as f64), 0.3 * ((i * 5 % 7) as f64 - 3.0)]
        })
        .collect();
    let x = Tensor::from_rows(&rows).unwrap();
    let y: Vec<usize> = (0..16).map(|i| i % 2).collect();
    let mut m = nudged_model(2, 6, 2, 1, 4);
    let mut opt = SgdMomentum::new(&m, 0.0, 1.0);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let g = Graph::new();
        let bound = m.bind(&g);
        let batch = [SourceBatch {
            branch: 0,
            features: &x,
            labels: &y,
        }];
        let loss = cls_loss(&bound, &batch).unwrap();
        losses.push(loss.item());
        let grads = g.backward(loss).unwrap();
        let gs: Vec<_> = bound.param_vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
        drop(grads);
        drop(bound);
        opt.step(&mut m, &gs, 0.1).unwrap();
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    assert!(losses.windows(2).filter(|w| w[1] > w[0]).count() < 5);
}

#[test]
fn default_training_lowers_classification_loss() {
    let task = generate_synthetic(&SyntheticSpec::desk_default()).unwrap();
    let view = task.training_view();
    let mut tr = Trainer::init(&view, TrainConfig::default()).unwrap();
    let mut cls = Vec::new();
    while tr.iteration() < tr.config().iterations {
        cls.push(tr.step(&view).unwrap().loss.cls);
    }
    let head: f64 = cls[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = cls[cls.len() - 20..].iter().sum::<f64>() / 20.0;
    assert_eq!(cls.len(), 3000);
    assert!(tail < head, "head {head} tail {tail}");
}

#[test]
fn single_source_mfsan_matches_direct_training() {
    let task = small_task(120, 3).with_sources(&[1]).unwrap();
    let cfg = short(60);
    let run = run_seed::<f64>(Method::Mfsan, &task, &cfg, 9);
    let via_harness = run.result.unwrap().model;

    let view = task.training_view();
    let mut tr = Trainer::init(&view, TrainConfig { seed: 9, ..cfg }).unwrap();
    tr.run(&view, &mut |_| Ok(None)).into_result().unwrap();
    assert!(same_bits(&via_harness, tr.model()));
}

#[test]
fn without_shift_target_accuracy_tracks_source_accuracy() {
    let spec = SyntheticSpec {
        samples_per_domain: 400,
        seed: 5,
        ..SyntheticSpec::desk_default().without_shift()
    };
    let task = generate_synthetic(&spec).unwrap();
    let run = run_seed::<f64>(Method::NoAdapt, &task, &short(1000), 0)
        .result
        .unwrap();
    let src = &task.sources()[0];
    let on_source = evaluate(&run.model, src.features(), src.labels())
        .unwrap()
        .average_vote_accuracy;
    let on_target = run.final_eval.average_vote_accuracy;
    assert!(
        (on_source - on_target).abs() <= 0.02,
        "source {on_source} target {on_target}"
    );
}

#[test]
fn identical_seeds_identical_bits_in_single_precision() {
    let task = small_task(80, 1);
    let view = task.training_view();
    let run = || {
        let mut tr = mfsan::Trainer32::init(&view, short(40)).unwrap();
        tr.run(&view, &mut |_| Ok(None)).into_result().unwrap();
        tr.into_model()
    };
    assert_eq!(run(), run());
}
