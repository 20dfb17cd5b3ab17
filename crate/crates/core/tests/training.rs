use glance_core::data::SynthConfig;
use glance_core::harness::{
    decode_checkpoint, encode_checkpoint, evaluate, synthetic_splits, train, BenchmarkConfig,
    ModelSettings, SplitSizes, Splits, TrainConfig,
};
use glance_core::inference::ProposalMode;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splits(seed: u64) -> Splits {
    let cfg = BenchmarkConfig {
        synth: SynthConfig {
            frames: (10, 14),
            feature_dim: 8,
            word_dim: 6,
            n_actions: 3,
            n_objects: 3,
            noise: 0.5,
            ..SynthConfig::default()
        },
        splits: SplitSizes {
            train: 40,
            val: 10,
            test: 10,
        },
    };
    synthetic_splits(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelSettings {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            max_positions: 16,
            ..ModelSettings::default()
        },
        batch_size: 8,
        learning_rate: 3e-3,
        clip_len: 4,
        stride: 2,
        epochs,
        seed: 11,
        ..TrainConfig::desk()
    }
}

#[test]
fn resumed_training_matches_uninterrupted_training() {
    let data = splits(1);
    let straight = train(&config(3), &data.train, &data.val, None, |_, _| Ok(())).unwrap();

    let first = train(&config(1), &data.train, &data.val, None, |_, _| Ok(())).unwrap();
    let bytes = encode_checkpoint(&first.state);
    let restored = decode_checkpoint(&bytes, Some(&first.state.model)).unwrap();
    assert_eq!(encode_checkpoint(&restored), bytes);
    let resumed = train(
        &config(3),
        &data.train,
        &data.val,
        Some(restored),
        |_, _| Ok(()),
    )
    .unwrap();

    assert_eq!(resumed.logs.len(), 2);
    for (a, b) in straight.logs[1..].iter().zip(&resumed.logs) {
        assert_eq!(a.epoch, b.epoch);
        assert_eq!(a.step_losses.len(), b.step_losses.len());
        for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
            assert!((x - y).abs() <= 1e-10, "step loss {x} vs {y}");
        }
    }
    assert_eq!(
        encode_checkpoint(&straight.state),
        encode_checkpoint(&resumed.state)
    );
}

#[test]
fn seeds_change_the_run() {
    let data = splits(2);
    let a = train(&config(1), &data.train, &data.val, None, |_, _| Ok(())).unwrap();
    let b = train(
        &TrainConfig {
            seed: 12,
            ..config(1)
        },
        &data.train,
        &data.val,
        None,
        |_, _| Ok(()),
    )
    .unwrap();
    assert_ne!(a.logs[0].step_losses, b.logs[0].step_losses);
}

#[test]
fn trained_model_beats_its_initialization_on_held_out_data() {
    let bench = BenchmarkConfig {
        synth: SynthConfig {
            frames: (12, 16),
            feature_dim: 8,
            word_dim: 6,
            n_actions: 3,
            n_objects: 3,
            noise: 0.5,
            distractors: 4,
            ..SynthConfig::default()
        },
        splits: SplitSizes {
            train: 240,
            val: 40,
            test: 60,
        },
    };
    let data = synthetic_splits(&bench, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let cfg = TrainConfig {
        model: ModelSettings {
            d_model: 16,
            ..config(0).model
        },
        batch_size: 16,
        clip_len: 3,
        ..config(15)
    };
    let untrained = train(
        &TrainConfig {
            epochs: 0,
            ..cfg.clone()
        },
        &data.train,
        &data.val,
        None,
        |_, _| Ok(()),
    )
    .unwrap();
    let trained = train(&cfg, &data.train, &data.val, None, |_, _| Ok(())).unwrap();
    let proposals = cfg.proposals();
    let (before, _) = evaluate(
        &untrained.state.params,
        &untrained.state.model,
        &data.test,
        &proposals,
    )
    .unwrap();
    let (after, preds) = evaluate(
        &trained.best_params,
        &trained.state.model,
        &data.test,
        &proposals,
    )
    .unwrap();
    assert!(trained.logs.last().unwrap().mean_loss < trained.logs[0].mean_loss);
    assert!(
        after.mean_iou >= before.mean_iou + 3.0,
        "{} vs {}",
        after.mean_iou,
        before.mean_iou
    );
    assert_eq!(preds.len(), data.test.len());
    assert!(preds
        .iter()
        .all(|p| p.mode == ProposalMode::Qagi && p.start <= p.end));
}
