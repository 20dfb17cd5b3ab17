//! The seeded synthetic benchmark used for loss, inference and σ
//! comparisons.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    evaluate, synthetic_splits, train, BenchmarkConfig, HarnessError, ModelSettings, SplitSizes,
    Splits, TrainConfig,
};
use crate::data::SynthConfig;
use crate::evaluation::EvalReport;
use crate::inference::ProposalMode;

/// 2,000 / 200 / 200 examples over a 4×4 action-object vocabulary. The
/// background is tiled with other action-object events, so every query
/// has look-alike content elsewhere in its own video.
pub fn benchmark_data() -> BenchmarkConfig {
    BenchmarkConfig {
        synth: SynthConfig {
            n_actions: 4,
            n_objects: 4,
            noise: 0.5,
            distractors: 8,
            ..SynthConfig::default()
        },
        splits: SplitSizes {
            train: 2000,
            val: 200,
            test: 200,
        },
    }
}

/// Small model and short clips sized for the benchmark's 24 to 32 frame
/// videos.
pub fn benchmark_training() -> TrainConfig {
    TrainConfig {
        model: ModelSettings {
            d_model: 32,
            heads: 4,
            layers: 1,
            d_ff: 64,
            max_positions: 64,
            ..ModelSettings::default()
        },
        learning_rate: 3e-3,
        clip_len: 4,
        stride: 2,
        epochs: 30,
        ..TrainConfig::desk()
    }
}

/// Generates the benchmark splits for one data seed.
pub fn benchmark_splits(data: &BenchmarkConfig, seed: u64) -> Result<Splits, HarnessError> {
    synthetic_splits(data, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Test-set results of one training run.
#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub qagi: EvalReport,
    pub sliding: EvalReport,
    pub epochs: usize,
    pub seconds: f64,
}

/// Trains on `splits.train`, selects by validation mIoU, and scores the
/// selected parameters on `splits.test` under both proposal modes.
pub fn run_benchmark(splits: &Splits, cfg: &TrainConfig) -> Result<BenchmarkRun, HarnessError> {
    let t0 = Instant::now();
    let out = train(cfg, &splits.train, &splits.val, None, |_, _| Ok(()))?;
    let proposals = cfg.proposals();
    let (qagi, _) = evaluate(
        &out.best_params,
        &out.state.model,
        &splits.test,
        &proposals.clone().with_mode(ProposalMode::Qagi),
    )?;
    let (sliding, _) = evaluate(
        &out.best_params,
        &out.state.model,
        &splits.test,
        &proposals.with_mode(ProposalMode::Sliding),
    )?;
    Ok(BenchmarkRun {
        qagi,
        sliding,
        epochs: out.logs.len(),
        seconds: t0.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        benchmark_training().validate().unwrap();
        let data = benchmark_data();
        assert_eq!(data.synth.frames, (24, 32));
        assert!(benchmark_training().model.max_positions >= data.synth.frames.1);
    }
}
