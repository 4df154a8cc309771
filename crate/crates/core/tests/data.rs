mod common;

use common::nudged_model;
use mfsan::autodiff::Tensor;
use mfsan::data::{generate_synthetic, AffineTransform, SyntheticSpec};
use mfsan::harness::{export_embeddings, run_seed, Method};
use mfsan::trainer::TrainConfig;

/// Per-column mean and standard error of the selected rows.
fn mean_se(x: &Tensor<f64>, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for &i in rows {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for &i in rows {
        for (k, v) in x.row(i).iter().enumerate() {
            var[k] += (v - mean[k]).powi(2) / (n - 1.0);
        }
    }
    (mean, var.iter().map(|v| (v / n).sqrt()).collect())
}

#[test]
fn transformed_class_means_follow_the_affine_map() {
    let spec = SyntheticSpec {
        samples_per_domain: 2000,
        seed: 17,
        ..SyntheticSpec::desk_default()
    };
    let task = generate_synthetic(&spec).unwrap();
    let src = &task.sources()[0];
    let shift = AffineTransform {
        rotation_deg: 50.0,
        scale: 1.5,
        translation: vec![1.0, -2.0, 0.0, 0.5, 0.0, 0.0, 0.0, 3.0],
    };
    let mut moved = src.features().clone();
    let d = moved.cols();
    for row in moved.data_mut().chunks_mut(d) {
        shift.apply(row, &spec.rotation_planes);
    }
    for c in 0..spec.num_classes {
        let rows: Vec<usize> = (0..src.len()).filter(|&i| src.labels()[i] == c).collect();
        let (mean, se) = mean_se(&moved, &rows);
        let mut want = spec.class_means[c].clone();
        shift.apply(&mut want, &spec.rotation_planes);
        for k in 0..d {
            assert!(
                (mean[k] - want[k]).abs() <= 3.0 * se[k],
                "class {c} coord {k}: {} vs {} (se {})",
                mean[k],
                want[k],
                se[k]
            );
        }
    }
}

#[test]
fn no_shift_embedding_centroids_agree() {
    let spec = SyntheticSpec {
        samples_per_domain: 400,
        seed: 8,
        ..SyntheticSpec::desk_default().without_shift()
    };
    let task = generate_synthetic(&spec).unwrap();
    let cfg = TrainConfig {
        iterations: 500,
        ..TrainConfig::default()
    };
    let model = run_seed::<f64>(Method::Mfsan, &task, &cfg, 8).result.unwrap().model;
    let dir = tempfile::tempdir().unwrap();
    for f in export_embeddings(&model, &task, dir.path()).unwrap() {
        let mut r = csv::Reader::from_path(&f).unwrap();
        let width = r.headers().unwrap().len() - 2;
        let mut by_domain: std::collections::BTreeMap<String, Vec<Vec<f64>>> = Default::default();
        for rec in r.records() {
            let rec = rec.unwrap();
            let row = (0..width).map(|k| rec[k].parse().unwrap()).collect();
            by_domain.entry(rec[width].to_string()).or_default().push(row);
        }
        let stats = |rows: &[Vec<f64>]| {
            let t = Tensor::from_rows(rows).unwrap();
            mean_se(&t, &(0..rows.len()).collect::<Vec<_>>())
        };
        let (mt, st) = stats(&by_domain["target"]);
        for s in ["source_0", "source_1"] {
            let (ms, ss) = stats(&by_domain[s]);
            for k in 0..width {
                let se = (ss[k].powi(2) + st[k].powi(2)).sqrt();
                assert!(
                    (ms[k] - mt[k]).abs() <= 3.0 * se.max(1e-12),
                    "{} {s} feature {k}: {} vs {} (se {se})",
                    f.display(),
                    ms[k],
                    mt[k]
                );
            }
        }
    }
}

#[test]
fn untrained_model_exports_every_row() {
    let task = generate_synthetic(&SyntheticSpec {
        samples_per_domain: 30,
        ..SyntheticSpec::desk_default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_embeddings(&nudged_model(8, 4, 4, 2, 0), &task, dir.path()).unwrap();
    let text = std::fs::read_to_string(&files[1]).unwrap();
    assert_eq!(text.lines().count(), 1 + 90);
}
