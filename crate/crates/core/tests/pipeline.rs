use gnnet_core::alignment::{track_candidate, AlignmentConfig, FeatureExtractor};
use gnnet_core::benchmark::{generate_dataset, Dataset, DatasetConfig};
use gnnet_core::losses::LossConfig;
use gnnet_core::net::{build_network, NetworkConfig, NetworkWeights};
use gnnet_core::pipeline::{self, BasinConfig, GradcheckProblem, Objective, PipelineError, TrainConfig};
use gnnet_core::tensor::Tensor;

fn tiny() -> Dataset {
    let cfg = DatasetConfig {
        width: 32,
        height: 32,
        focal: 28.0,
        frames: 4,
        conditions: 2,
        train_scenes: 1,
        val_scenes: 1,
        test_scenes: 1,
        pairs_per_scene: 3,
        positives: 16,
        negatives: 16,
        ..Default::default()
    };
    generate_dataset(&cfg, 2).unwrap()
}

fn small_net(seed: u64) -> NetworkWeights {
    build_network(&NetworkConfig {
        descriptor_dim: 4,
        pyramid_levels: 2,
        base_width: 4,
        seed,
        ..Default::default()
    })
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        loss: LossConfig {
            levels_used: vec![0, 1],
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn one_epoch_writes_loadable_weights() {
    let ds = tiny();
    let intr = ds.config.intrinsics();
    let mut seen = Vec::new();
    let out = pipeline::train(
        &small_net(1),
        ds.split("train").unwrap(),
        ds.split("val"),
        &intr,
        &train_cfg(1),
        |log, _| seen.push(log.epoch),
    )
    .unwrap();
    assert_eq!(seen, vec![1]);
    assert!(out.logs[0].total.is_finite());
    assert!(out.logs[0].val_auc.is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.gnnw");
    out.best.write_to(&path).unwrap();
    let back = NetworkWeights::read_from(&path).unwrap();
    assert_eq!(back.params(), out.best.params());
}

#[test]
fn training_is_deterministic() {
    let ds = tiny();
    let intr = ds.config.intrinsics();
    let run = || {
        pipeline::train(&small_net(2), ds.split("train").unwrap(), None, &intr, &train_cfg(2), |_, _| {})
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.best.params(), b.best.params());
    assert_eq!(a.logs, b.logs);
}

#[test]
fn non_finite_weights_abort_training() {
    let ds = tiny();
    let mut w = small_net(3);
    w.params_mut()[0].data_mut()[0] = f64::NAN;
    let err = pipeline::train(&w, ds.split("train").unwrap(), None, &ds.config.intrinsics(), &train_cfg(1), |_, _| {})
        .unwrap_err();
    assert!(matches!(err, PipelineError::NonFinite { .. }), "{err}");
}

#[test]
fn candidate_equal_to_reference_tracks_to_identity() {
    let ds = tiny();
    let split = ds.split("test").unwrap();
    let intr = ds.config.intrinsics();
    let cand = split.candidates().next().unwrap();
    let kf = pipeline::keyframe_for(split, cand.reference, &intr).unwrap();
    let cfg = AlignmentConfig {
        levels: vec![1, 0],
        ..AlignmentConfig::for_intensity()
    };
    let r = track_candidate(&kf, &kf.image, FeatureExtractor::Intensity, &cfg).unwrap();
    assert!(r.converged);
    assert!(r.pose.log().norm() < 1e-6);
}

#[test]
fn basin_trials_are_shared_and_bounded() {
    let ds = tiny();
    let split = ds.split("test").unwrap();
    let cfg = BasinConfig {
        trials: 100,
        ..Default::default()
    };
    let a = pipeline::basin_trials(split, &ds.config.intrinsics(), &cfg).unwrap();
    let b = pipeline::basin_trials(split, &ds.config.intrinsics(), &cfg).unwrap();
    assert_eq!(a.len(), 100);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.ua, x.ub, x.start), (y.ua, y.ub, y.start));
        assert!((x.start - x.ub).amax() <= cfg.radius + 1e-12);
    }
    let rate = pipeline::basin_success(split, &a, FeatureExtractor::Intensity, &cfg).unwrap();
    assert!((0.0..=1.0).contains(&rate));
}

fn problem(w: &NetworkWeights) -> GradcheckProblem<'_> {
    let (image_a, image_b, batch) = pipeline::default_gradcheck_inputs(0, 16, 4);
    GradcheckProblem {
        weights: w,
        image_a,
        image_b,
        batch,
        loss: LossConfig {
            levels_used: vec![0, 1],
            ..Default::default()
        },
        seed: 0,
    }
}

#[test]
fn gradcheck_passes_on_small_network() {
    let w = small_net(0);
    let report = pipeline::gradcheck(&problem(&w), 1e-5, 1e-4, 1e-6, None).unwrap();
    assert!(report.passed(), "max rel err {}", report.max_rel_error());
    assert_eq!(report.blocks.len(), 3 * w.params().len());
}

#[test]
fn gradcheck_catches_a_broken_backward_rule() {
    let w = small_net(0);
    // Halve one block of the GN gradient, as a wrong backward rule would.
    let tamper = |which: Objective, name: &str, g: &mut Tensor| {
        if which == Objective::GaussNewton && name == "head0.w" {
            for v in g.data_mut() {
                *v *= 0.5;
            }
        }
    };
    let report = pipeline::gradcheck(&problem(&w), 1e-5, 1e-4, 1e-6, Some(&tamper)).unwrap();
    assert!(!report.passed());
    let bad: Vec<_> = report.blocks.iter().filter(|b| b.max_rel_error >= 1e-4).collect();
    assert_eq!(bad.len(), 1);
    assert_eq!((bad[0].objective, bad[0].block.as_str()), (Objective::GaussNewton, "head0.w"));
}
