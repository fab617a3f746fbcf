use std::fs;

use lga_toy::ablate::write_rows;
use lga_toy::{
    ablate, train, AblationAxis, DatasetConfig, ModelConfig, ToyError, ToyModel, TrainConfig,
    TrainOutputs,
};

fn small() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        lr_decay_epoch: 1,
        batch_size: 4,
        train_samples: 8,
        test_samples: 4,
        pairs: 64,
        data: DatasetConfig {
            height: 32,
            width: 32,
            cue_radius: 3,
            ..DatasetConfig::default()
        },
        model: ModelConfig {
            enc_channels: 4,
            latent_channels: 8,
            lga_channels: 4,
            layers: 2,
            ..ModelConfig::default()
        },
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_histories_and_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let run = |dir: &std::path::Path| {
        train(
            &small(),
            &TrainOutputs {
                dir: Some(dir.to_path_buf()),
                checkpoints: true,
            },
        )
        .unwrap()
    };
    let (ra, rb) = (run(a.path()), run(b.path()));
    assert_eq!(ra.history, rb.history);
    assert_eq!(ra.model, rb.model);
    let csv = |d: &tempfile::TempDir| fs::read(d.path().join("metrics.csv")).unwrap();
    assert_eq!(csv(&a), csv(&b));
    for f in [
        "manifest.json",
        "edge_kernel_ne.lgaf",
        "transform_1.lgaf",
        "enc1.weight.lgaf",
    ] {
        let p = format!("checkpoints/epoch_001/{f}");
        assert_eq!(
            fs::read(a.path().join(&p)).unwrap(),
            fs::read(b.path().join(&p)).unwrap(),
            "{f}"
        );
    }

    let other = train(
        &TrainConfig {
            seed: 18,
            ..small()
        },
        &TrainOutputs::default(),
    )
    .unwrap();
    assert_ne!(other.model, ra.model);
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let cfg = TrainConfig { lr: 0.0, ..small() };
    let out = train(&cfg, &TrainOutputs::default()).unwrap();
    assert_eq!(out.model, ToyModel::new(cfg.model, cfg.seed).unwrap());
    let first = out.history[0];
    for h in &out.history[1..] {
        assert_eq!(
            (h.pixel_accuracy, h.miou),
            (first.pixel_accuracy, first.miou)
        );
    }
}

#[test]
fn zero_layers_matches_the_control_exactly() {
    let zero = TrainConfig {
        model: ModelConfig {
            layers: 0,
            ..small().model
        },
        ..small()
    };
    let control = TrainConfig {
        model: ModelConfig {
            lga: false,
            ..small().model
        },
        ..small()
    };
    let (a, b) = (
        train(&zero, &TrainOutputs::default()).unwrap(),
        train(&control, &TrainOutputs::default()).unwrap(),
    );
    assert_eq!(a.history, b.history);
    assert!(a.model.lga.is_none() && b.model.lga.is_none());
    assert_eq!(
        (&a.model.enc1, &a.model.dec1),
        (&b.model.enc1, &b.model.dec1)
    );
    assert!(a.history.iter().all(|h| h.contrastive_loss == 0.0));
}

#[test]
fn layer_ablation_has_one_row_per_value() {
    let cfg = TrainConfig {
        epochs: 1,
        ..small()
    };
    let rows = ablate(AblationAxis::Layers, &[0, 1, 2, 4], &cfg).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.value).collect::<Vec<_>>(),
        vec![0, 1, 2, 4]
    );
    assert!(rows
        .iter()
        .all(|r| r.axis == "layers" && (0.0..=1.0).contains(&r.miou)));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ablation.csv");
    write_rows(&path, &rows).unwrap();
    let text = fs::read_to_string(path).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "axis,value,seed,pixel_accuracy,miou"
    );
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn ablation_axes_parse_and_validate() {
    assert_eq!(
        "groups".parse::<AblationAxis>().unwrap(),
        AblationAxis::Groups
    );
    assert!(matches!(
        "depth".parse::<AblationAxis>(),
        Err(ToyError::Config(_))
    ));
    let cfg = small();
    assert_eq!(
        AblationAxis::DivergenceLoss.apply(&cfg, 0).unwrap().lambda,
        0.0
    );
    assert_eq!(
        AblationAxis::DivergenceLoss.apply(&cfg, 1).unwrap().lambda,
        cfg.lambda
    );
    assert!(AblationAxis::DivergenceLoss.apply(&cfg, 2).is_err());
    // 4 LGA channels cannot be split into 3 groups.
    assert!(ablate(AblationAxis::Groups, &[1, 3], &cfg).is_err());
    assert!(ablate(AblationAxis::Layers, &[], &cfg).is_err());
}

#[test]
fn divergence_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr: 1e300,
        ..small()
    };
    let err = train(
        &cfg,
        &TrainOutputs {
            dir: Some(dir.path().to_path_buf()),
            checkpoints: false,
        },
    )
    .unwrap_err();
    match err {
        ToyError::Diverged { dump, .. } => {
            let body: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(dump).unwrap()).unwrap();
            assert_eq!(body["config"]["lr"], 1e300);
        }
        other => panic!("expected divergence, got {other}"),
    }
}
