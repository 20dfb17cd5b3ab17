//! Helpers shared by the integration and acceptance targets.

#![allow(dead_code)]

use glance_core::alignment::LossVariant;
use glance_core::autograd::Graph;
use glance_core::data::SynthConfig;
use glance_core::harness::{
    batch_loss, synthetic_splits, BenchmarkConfig, Dataset, ModelSettings, SplitSizes, TrainConfig,
};
use glance_core::model::{gradients, init_params, BoundParams, ModelConfig, Parameters};
use rand::rngs::mock::StepRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Three 6-frame videos with 4-token queries, and a training config whose
/// clips cut each video into 3 pieces.
pub fn tiny_problem(
    variant: LossVariant,
    seed: u64,
) -> (TrainConfig, Dataset, ModelConfig, Parameters) {
    let bench = BenchmarkConfig {
        synth: SynthConfig {
            frames: (6, 6),
            feature_dim: 5,
            word_dim: 4,
            n_actions: 3,
            n_objects: 3,
            ..SynthConfig::default()
        },
        splits: SplitSizes {
            train: 3,
            val: 0,
            test: 0,
        },
    };
    let splits = synthetic_splits(&bench, &mut ChaCha8Rng::seed_from_u64(seed)).expect("tiny data");
    let cfg = TrainConfig {
        model: ModelSettings {
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            dropout: 0.0,
            max_positions: 6,
            ..ModelSettings::default()
        },
        batch_size: 3,
        clip_len: 2,
        stride: 2,
        loss_variant: variant,
        seed,
        ..TrainConfig::desk()
    };
    let model = cfg.model.resolve(5, 4);
    let params = init_params(&model, &mut ChaCha8Rng::seed_from_u64(seed)).expect("init");
    (cfg, splits.train, model, params)
}

fn loss_at(params: &Parameters, model: &ModelConfig, data: &Dataset, cfg: &TrainConfig) -> f64 {
    let mut g = Graph::new();
    let bound = BoundParams::frozen(&mut g, params);
    let batch: Vec<usize> = (0..data.len()).collect();
    let loss = batch_loss(
        &mut g,
        &bound,
        model,
        data,
        &batch,
        cfg,
        &mut StepRng::new(0, 1),
    )
    .expect("loss");
    g.scalar(loss.total)
}

/// Below this L2 norm on both sides a gradient counts as zero. Central
/// differences of an O(1) loss carry roundoff near 1e-12, so tensors the
/// loss is invariant to (key biases under softmax, for one) land here.
pub const ZERO_GRADIENT: f64 = 1e-8;

/// Per-tensor relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
/// in the L2 norm, with central differences of width `2 * step`.
pub fn gradient_errors(
    cfg: &TrainConfig,
    data: &Dataset,
    model: &ModelConfig,
    params: &Parameters,
    step: f64,
) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let bound = BoundParams::trainable(&mut g, params);
    let batch: Vec<usize> = (0..data.len()).collect();
    let loss = batch_loss(
        &mut g,
        &bound,
        model,
        data,
        &batch,
        cfg,
        &mut StepRng::new(0, 1),
    )
    .expect("loss");
    let analytic = gradients(&g, loss.total, &bound, params).expect("gradients");
    let mut out = Vec::new();
    let mut probe = params.clone();
    for (name, p) in params.iter() {
        let a = &analytic.get(name).expect("gradient").value;
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for (idx, &v) in p.value.indexed_iter() {
            probe.get_mut(name).unwrap().value[idx] = v + step;
            let up = loss_at(&probe, model, data, cfg);
            probe.get_mut(name).unwrap().value[idx] = v - step;
            let down = loss_at(&probe, model, data, cfg);
            probe.get_mut(name).unwrap().value[idx] = v;
            let numeric = (up - down) / (2.0 * step);
            diff += (a[idx] - numeric).powi(2);
            an += a[idx].powi(2);
            nn += numeric.powi(2);
        }
        let scale = an.sqrt().max(nn.sqrt());
        let rel = if scale < ZERO_GRADIENT {
            0.0
        } else {
            diff.sqrt() / scale
        };
        out.push((name.clone(), rel));
    }
    out
}
