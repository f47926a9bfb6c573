mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use wiselab::net::{self, ArchConfig};
use wiselab::optim::{self, TrainConfig};
use wiselab::robust::{extract_features, robustness_score, svm_accuracy, train_linear_svm, FeatureMatrix, SvmConfig};
use wiselab::shapes::{build_dataset, DatasetConfig, ShiftConfig, ShiftKind};

#[test]
fn separable_sets_are_fit_exactly_with_a_closed_gap() {
    for seed in 0..30 {
        let data = separable(seed);
        let cfg = SvmConfig { seed, ..SvmConfig::default() };
        let model = train_linear_svm(&data, &cfg).unwrap();
        assert_eq!(svm_accuracy(&model, &data).unwrap(), 1.0, "seed {seed}");
        for rep in &model.reports {
            // The gap bound holds even for the occasional solve that hits
            // max_epochs with a violation just above tolerance.
            let gap = rep.primal - rep.dual;
            assert!(gap >= -1e-9 && gap < 1e-3 * (1.0 + rep.primal.abs()), "seed {seed}: gap {gap}");
            for w in rep.dual_history.windows(2) {
                assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()), "seed {seed}: {} then {}", w[0], w[1]);
            }
        }
    }
}

#[test]
fn overlapping_sets_still_have_a_monotone_dual() {
    let mut r = rng(77);
    let features: Vec<Vec<f64>> = (0..80).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..80).map(|_| r.random_range(0..3)).collect();
    let model = train_linear_svm(&FeatureMatrix::new(features, labels).unwrap(), &SvmConfig::default()).unwrap();
    for rep in &model.reports {
        assert!(rep.dual <= rep.primal + 1e-9);
        for w in rep.dual_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * (1.0 + w[0].abs()));
        }
    }
}

fn small_source(seed: u64) -> wiselab::shapes::Dataset {
    build_dataset(&DatasetConfig {
        classes: (0..8).collect(),
        per_class_train: 10,
        per_class_test: 10,
        n_points: 64,
        shift: ShiftConfig::new(ShiftKind::ObjOnly),
        seed,
    })
    .unwrap()
}

fn small_arch() -> ArchConfig {
    ArchConfig::new(64, &[32, 64], 32, 8)
}

#[test]
fn feature_rows_follow_cloud_order() {
    let data = small_source(1);
    let ckpt = net::init_params(&small_arch(), false, 3).unwrap();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut rng(2));
    let permuted: Vec<_> = order.iter().map(|&i| data.train[i].clone()).collect();
    let a = extract_features(&ckpt, &data.train, &data.fingerprint).unwrap();
    let b = extract_features(&ckpt, &permuted, &data.fingerprint).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(b.features[k], a.features[i]);
        assert_eq!(b.labels[k], a.labels[i]);
    }
}

#[test]
fn random_backbone_clears_chance_and_pretraining_helps() {
    let arch = small_arch();
    let mut random_scores = Vec::new();
    for seed in 0..5 {
        let data = small_source(10 + seed);
        let ckpt = net::init_params(&arch, false, seed).unwrap();
        let score = robustness_score(&ckpt, &data, &SvmConfig::default()).unwrap();
        assert!(score >= 1.0 / 8.0 - 0.05, "seed {seed}: {score}");
        random_scores.push(score);
    }
    let data = small_source(10);
    let (pt, _) = optim::pretrain_standin(&arch, &data, &TrainConfig::new(30, 0.01, 0)).unwrap();
    let trained = robustness_score(&pt, &data, &SvmConfig::default()).unwrap();
    assert!(trained > random_scores[0], "pretrained {trained} vs random {}", random_scores[0]);
}
