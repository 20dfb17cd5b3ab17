//! Training configuration, AdamW training loop with plateau schedule,
//! checkpoints, and evaluation of trained parameters.

mod benchmark;
mod checkpoint;
mod dataset;
mod optim;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use benchmark::{
    benchmark_data, benchmark_splits, benchmark_training, run_benchmark, BenchmarkRun,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use dataset::{
    feature_path, load_words, make_batches, synthetic_splits, words_path, write_splits,
    BenchmarkConfig, Dataset, Example, SplitSizes, Splits,
};
pub use optim::{
    adamw_update, clip_global_norm, global_norm, AdamWConfig, PlateauConfig, Schedule,
};

use crate::alignment::{
    clip_spans, clip_weight, frame_weights, glance_index, slice_clips_graph, total_loss_graph,
    AlignError, ExampleVars, GaussianConfig, KlTarget, LossConfig, LossVariant, Reduction,
};
use crate::autograd::Graph;
use crate::data::DataError;
use crate::evaluation::{temporal_iou, EvalError, EvalReport, DEFAULT_THRESHOLDS};
use crate::inference::{
    retrieve, InferenceError, Prediction, ProposalConfig, ProposalMode, Stride,
};
use crate::model::{
    forward_example, gradients, init_params, BoundParams, GuidanceLayer, Mode, ModelConfig,
    ModelError, Parameters,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("need at least 2 examples to form a batch, got {0}")]
    DatasetTooSmall(usize),
    #[error("no features for video `{0}`")]
    MissingVideo(String),
    #[error("step {step}: loss is {value}")]
    NonFiniteLoss { step: u64, value: f64 },
    #[error("step {step}: gradient of `{name}` is not finite")]
    NonFiniteGradient { step: u64, name: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint was written for {found:?}, expected {expected:?}")]
    ConfigMismatch {
        expected: Box<ModelConfig>,
        found: Box<ModelConfig>,
    },
}

/// Model shape settings; feature and word sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub guidance_layer: GuidanceLayer,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self::from_config(&ModelConfig::desk(1, 1))
    }
}

impl ModelSettings {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            heads: cfg.heads,
            layers: cfg.layers,
            d_ff: cfg.d_ff,
            dropout: cfg.dropout,
            max_positions: cfg.max_positions,
            guidance_layer: cfg.guidance_layer,
        }
    }

    pub fn resolve(&self, d_feat: usize, d_word: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            dropout: self.dropout,
            d_feat,
            d_word,
            max_positions: self.max_positions,
            guidance_layer: self.guidance_layer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelSettings,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub min_learning_rate: f64,
    pub plateaus_at_floor: usize,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub loss_variant: LossVariant,
    pub qag_weight: f64,
    pub kl_target: KlTarget,
    pub reduction: Reduction,
    pub sigma: f64,
    pub clip_len: usize,
    pub stride: usize,
    pub inference_mode: ProposalMode,
    pub window_fractions: Vec<f64>,
    pub proposal_stride: Stride,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// `d_model = 64`, 4 heads, 2 layers, clips of 8 frames with stride 4,
    /// batches of 16.
    pub fn desk() -> Self {
        let gauss = GaussianConfig::default();
        let loss = LossConfig::default();
        let proposals = ProposalConfig::default();
        let plateau = PlateauConfig::default();
        Self {
            model: ModelSettings::default(),
            batch_size: 16,
            learning_rate: 1e-4,
            lr_decay_factor: plateau.factor,
            plateau_patience: plateau.patience,
            plateau_min_delta: plateau.min_delta,
            min_learning_rate: plateau.min_lr,
            plateaus_at_floor: plateau.plateaus_at_floor,
            grad_clip_norm: 1.0,
            epochs: 30,
            seed: 0,
            loss_variant: loss.variant,
            qag_weight: loss.qag_weight,
            kl_target: loss.kl_target,
            reduction: loss.reduction,
            sigma: gauss.sigma,
            clip_len: gauss.clip_len,
            stride: gauss.stride,
            inference_mode: proposals.mode,
            window_fractions: proposals.window_fractions,
            proposal_stride: proposals.stride,
            adamw: AdamWConfig::default(),
        }
    }

    /// Full-size settings: `d_model = 512`, 8 heads, batches of 256.
    pub fn paper() -> Self {
        Self {
            model: ModelSettings::from_config(&ModelConfig::paper(1, 1)),
            batch_size: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size < 2 {
            return bad(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!(
                "grad_clip_norm must be positive, got {}",
                self.grad_clip_norm
            ));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            ));
        }
        if self.qag_weight < 0.0 {
            return bad(format!(
                "qag_weight must be non-negative, got {}",
                self.qag_weight
            ));
        }
        self.gaussian().validate()?;
        self.proposals().validate()?;
        Ok(())
    }

    pub fn gaussian(&self) -> GaussianConfig {
        GaussianConfig {
            sigma: self.sigma,
            clip_len: self.clip_len,
            stride: self.stride,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            variant: self.loss_variant,
            qag_weight: self.qag_weight,
            kl_target: self.kl_target,
            reduction: self.reduction,
        }
    }

    pub fn proposals(&self) -> ProposalConfig {
        ProposalConfig {
            window_fractions: self.window_fractions.clone(),
            stride: self.proposal_stride,
            mode: self.inference_mode,
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.lr_decay_factor,
            patience: self.plateau_patience,
            min_delta: self.plateau_min_delta,
            min_lr: self.min_learning_rate,
            plateaus_at_floor: self.plateaus_at_floor,
        }
    }

    /// Source for the shuffling and dropout of one epoch. Each epoch has
    /// its own stream so a resumed run replays the same draws.
    pub fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        rng
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: ModelConfig,
    pub params: Parameters,
    pub first: Parameters,
    pub second: Parameters,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub schedule: Schedule,
}

impl TrainState {
    /// Fresh parameters drawn from stream 0 of the configured seed.
    pub fn init(model: ModelConfig, cfg: &TrainConfig) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = init_params(&model, &mut rng)?;
        Ok(Self::from_params(model, params, cfg.learning_rate))
    }

    pub fn from_params(model: ModelConfig, params: Parameters, learning_rate: f64) -> Self {
        Self {
            model,
            first: params.zeros_like(),
            second: params.zeros_like(),
            params,
            step: 0,
            epoch: 0,
            schedule: Schedule::new(learning_rate),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub total: f64,
    /// Contrastive part (GLS-NCE unless another variant is configured).
    pub contrastive: f64,
    pub qag: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Records the batch loss on `g` and returns its handles.
pub fn batch_loss(
    g: &mut Graph,
    bound: &BoundParams,
    model: &ModelConfig,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<crate::alignment::LossVars, HarnessError> {
    let gauss = cfg.gaussian();
    let mut vars = Vec::with_capacity(batch.len());
    for &i in batch {
        let e = &data.examples[i];
        let video = data.video_of(e);
        let out = forward_example(g, bound, model, Mode::Train, rng, &e.tokens, video)?;
        let len = video.len();
        let gi = glance_index(e.annotation.glance, video.duration, len);
        let spans = clip_spans(len, gauss.clip_len, gauss.stride);
        let clips = slice_clips_graph(g, out.frames, &spans);
        let clip_weights = spans
            .iter()
            .enumerate()
            .map(|(k, &s)| clip_weight(k + 1, s, len, gi, &gauss))
            .collect();
        let video_feature = g.max_rows(out.frames);
        let sentence = g.max_rows(out.words);
        vars.push(ExampleVars {
            clips,
            clip_weights,
            video: video_feature,
            sentence,
            guidance: out.guidance,
            frame_weights: frame_weights(len, gi, gauss.sigma),
        });
    }
    Ok(total_loss_graph(g, &vars, &cfg.loss())?)
}

/// Forward, loss, gradients, global-norm clipping and one AdamW update.
pub fn train_step(
    state: &mut TrainState,
    data: &Dataset,
    batch: &[usize],
    cfg: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<StepMetrics, HarnessError> {
    let mut g = Graph::new();
    let bound = BoundParams::trainable(&mut g, &state.params);
    let loss = batch_loss(&mut g, &bound, &state.model, data, batch, cfg, rng)?;
    let total = g.scalar(loss.total);
    if !total.is_finite() {
        return Err(HarnessError::NonFiniteLoss {
            step: state.step + 1,
            value: total,
        });
    }
    let mut grads = gradients(&g, loss.total, &bound, &state.params)?;
    if let Some((name, _)) = grads
        .iter()
        .find(|(_, p)| p.value.iter().any(|v| !v.is_finite()))
    {
        return Err(HarnessError::NonFiniteGradient {
            step: state.step + 1,
            name: name.clone(),
        });
    }
    let (grad_norm, clipped_norm) = clip_global_norm(&mut grads, cfg.grad_clip_norm);
    state.step += 1;
    adamw_update(
        &mut state.params,
        &mut state.first,
        &mut state.second,
        &grads,
        state.step,
        state.schedule.learning_rate,
        &cfg.adamw,
    );
    Ok(StepMetrics {
        total,
        contrastive: g.scalar(loss.contrastive),
        qag: loss.qag.map_or(0.0, |q| g.scalar(q)),
        grad_norm,
        clipped_norm,
    })
}

/// Retrieves every example of `data` and scores it against its
/// evaluation bounds.
pub fn evaluate(
    params: &Parameters,
    model: &ModelConfig,
    data: &Dataset,
    proposals: &ProposalConfig,
) -> Result<(EvalReport, Vec<Prediction>), HarnessError> {
    let mut ious = Vec::with_capacity(data.len());
    let mut preds = Vec::with_capacity(data.len());
    for e in &data.examples {
        let a = &e.annotation;
        let gt = a.eval_bounds().ok_or_else(|| EvalError::MissingBounds {
            video_id: a.video_id.clone(),
            query: a.query.clone(),
        })?;
        let r = retrieve(data.video_of(e), &e.tokens, params, model, proposals)?;
        ious.push(temporal_iou((r.start, r.end), gt)?);
        preds.push(Prediction::new(&a.video_id, &a.query, &r, proposals.mode));
    }
    Ok((EvalReport::from_ious(ious, &DEFAULT_THRESHOLDS)?, preds))
}

/// One line of the training metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_contrastive: f64,
    pub mean_qag: f64,
    pub mean_grad_norm: f64,
    pub step_losses: Vec<f64>,
    pub val_miou: f64,
    pub val_recall: BTreeMap<String, f64>,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Parameters from the epoch with the best validation mIoU.
    pub best_params: Parameters,
    pub best_val_miou: f64,
    pub logs: Vec<EpochLog>,
}

/// Runs one epoch of updates over `train` and returns the per-step
/// metrics.
pub fn train_epoch(
    state: &mut TrainState,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<StepMetrics>, HarnessError> {
    let mut rng = cfg.epoch_rng(state.epoch);
    let batches = make_batches(train.len(), cfg.batch_size, &mut rng)?;
    let mut metrics = Vec::with_capacity(batches.len());
    for batch in &batches {
        metrics.push(train_step(state, train, batch, cfg, &mut rng)?);
    }
    state.epoch += 1;
    Ok(metrics)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Trains until `cfg.epochs` epochs are complete or the schedule is
/// exhausted, validating after every epoch. `on_epoch` sees each log
/// entry and the state after that epoch.
pub fn train(
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    resume: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState) -> Result<(), HarnessError>,
) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let mut state = match resume {
        Some(s) => s,
        None => {
            let model = cfg
                .model
                .resolve(train.feature_dim(), train_word_dim(train)?);
            TrainState::init(model, cfg)?
        }
    };
    let plateau = cfg.plateau();
    let proposals = cfg.proposals();
    let mut best_params = state.params.clone();
    let mut logs = Vec::new();
    while state.epoch < cfg.epochs && !state.schedule.exhausted(&plateau) {
        let started = Instant::now();
        let epoch = state.epoch;
        let learning_rate = state.schedule.learning_rate;
        let metrics = train_epoch(&mut state, train, cfg)?;
        let (report, _) = evaluate(&state.params, &state.model, val, &proposals)?;
        let improved = state.schedule.observe(report.mean_iou, &plateau);
        if improved {
            best_params = state.params.clone();
        }
        let log = EpochLog {
            epoch,
            learning_rate,
            steps: metrics.len(),
            mean_loss: mean(metrics.iter().map(|m| m.total)),
            mean_contrastive: mean(metrics.iter().map(|m| m.contrastive)),
            mean_qag: mean(metrics.iter().map(|m| m.qag)),
            mean_grad_norm: mean(metrics.iter().map(|m| m.grad_norm)),
            step_losses: metrics.iter().map(|m| m.total).collect(),
            val_miou: report.mean_iou,
            val_recall: report.recall_at,
            improved,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log, &state)?;
        logs.push(log);
    }
    Ok(TrainOutcome {
        best_val_miou: state.schedule.best_val_miou.unwrap_or(0.0),
        state,
        best_params,
        logs,
    })
}

fn train_word_dim(train: &Dataset) -> Result<usize, HarnessError> {
    train
        .examples
        .first()
        .map(|e| e.tokens.embeddings.ncols())
        .ok_or(HarnessError::DatasetTooSmall(0))
}
