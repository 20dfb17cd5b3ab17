//! Gaussian alignment: glance-centred frame weights, sliding-window clips
//! with midpoint weights, max pooling, and the contrastive and KL losses
//! used for training.
//!
//! Frame and clip indices are 1-based throughout this module.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};

/// Floor applied to attention values before taking logarithms.
pub const ATTENTION_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("frame index {index} outside [1, {len}]")]
    IndexOutOfRange { index: f64, len: usize },
    #[error("contrastive losses need at least 2 examples per batch, got {0}")]
    BatchTooSmall(usize),
    #[error("invalid gaussian config: {0}")]
    Config(String),
    #[error("batch inputs disagree: {0}")]
    Mismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianConfig {
    pub sigma: f64,
    pub clip_len: usize,
    pub stride: usize,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            sigma: 0.4,
            clip_len: 8,
            stride: 4,
        }
    }
}

impl GaussianConfig {
    pub fn validate(&self) -> Result<(), AlignError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(AlignError::Config(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.stride == 0 || self.stride > self.clip_len {
            return Err(AlignError::Config(format!(
                "need 1 <= stride <= clip_len, got stride {} clip_len {}",
                self.stride, self.clip_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    VideoNce,
    ClipNce,
    #[default]
    GlsNce,
}

/// How the outer sums of the combined loss are reduced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// Target of the attention KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTarget {
    /// Frame weights renormalized to a probability vector.
    #[default]
    Normalized,
    /// Raw peak-normalized weights, as printed.
    Unnormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Multiplier on the KL term; `0` disables it.
    pub qag_weight: f64,
    pub kl_target: KlTarget,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::GlsNce,
            qag_weight: 1.0,
            kl_target: KlTarget::Normalized,
            reduction: Reduction::Mean,
        }
    }
}

/// Maps frame index `i ∈ [1, len]` linearly onto `[-1, 1]`. A single
/// frame maps to `0`.
pub fn frame_index_scale(i: f64, len: usize) -> Result<f64, AlignError> {
    if len == 0 || !(1.0..=len as f64).contains(&i) {
        return Err(AlignError::IndexOutOfRange { index: i, len });
    }
    Ok(scale_unchecked(i, len))
}

fn scale_unchecked(i: f64, len: usize) -> f64 {
    if len == 1 {
        0.0
    } else {
        (i - 1.0) * 2.0 / (len as f64 - 1.0) - 1.0
    }
}

/// Real-valued glance position in frame-index units:
/// `1 + glance / duration · (len - 1)`.
pub fn glance_index(glance: f64, duration: f64, len: usize) -> f64 {
    if duration <= 0.0 || len <= 1 {
        return 1.0;
    }
    (1.0 + glance / duration * (len as f64 - 1.0)).clamp(1.0, len as f64)
}

/// Peak-normalized Gaussian weight at real index `x`, centred on glance
/// index `g`. Equals `1` at `x = g`.
pub fn gaussian_weight(x: f64, len: usize, g: f64, sigma: f64) -> f64 {
    let d = scale_unchecked(x, len) - scale_unchecked(g, len);
    (-(d * d) / (2.0 * sigma * sigma)).exp().clamp(0.0, 1.0)
}

/// Weight of every frame `1..=len`.
pub fn frame_weights(len: usize, g: f64, sigma: f64) -> Vec<f64> {
    (1..=len)
        .map(|i| gaussian_weight(i as f64, len, g, sigma))
        .collect()
}

/// Inclusive 1-based frame span.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i <= self.end
    }
}

/// Windows of `clip_len` frames starting at `1, 1 + stride, …`; when the
/// last full window stops short of `len`, one truncated window at the next
/// stride position covers the tail.
pub fn clip_spans(len: usize, clip_len: usize, stride: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut start = 1;
    while start + clip_len - 1 <= len {
        spans.push(Span {
            start,
            end: start + clip_len - 1,
        });
        start += stride;
    }
    let covered = spans.last().map_or(0, |s| s.end);
    if covered < len {
        spans.push(Span { start, end: len });
    }
    spans
}

/// Sampling point for clip `i` (1-based): `(i - 1)·stride + clip_len / 2`,
/// clamped into the clip's own span.
pub fn clip_midpoint(clip_index: usize, span: Span, cfg: &GaussianConfig) -> f64 {
    let m = (clip_index - 1) as f64 * cfg.stride as f64 + cfg.clip_len as f64 / 2.0;
    m.clamp(span.start as f64, span.end as f64)
}

pub fn clip_weight(clip_index: usize, span: Span, len: usize, g: f64, cfg: &GaussianConfig) -> f64 {
    gaussian_weight(clip_midpoint(clip_index, span, cfg), len, g, cfg.sigma)
}

/// Max-pooled clips of one video together with their Gaussian weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSet {
    /// `N × d_model`
    pub clip_features: Array2<f64>,
    /// In `[0, 1]`; empty until [`ClipSet::with_weights`] is called.
    pub clip_weights: Vec<f64>,
    pub spans: Vec<Span>,
}

impl ClipSet {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn with_weights(mut self, len: usize, g: f64, cfg: &GaussianConfig) -> Self {
        self.clip_weights = self
            .spans
            .iter()
            .enumerate()
            .map(|(i, &s)| clip_weight(i + 1, s, len, g, cfg))
            .collect();
        self
    }
}

fn column_max(m: ndarray::ArrayView2<f64>) -> Array1<f64> {
    m.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b))
}

pub fn slice_clips(frame_features: &Array2<f64>, cfg: &GaussianConfig) -> ClipSet {
    let spans = clip_spans(frame_features.nrows(), cfg.clip_len, cfg.stride);
    let mut clip_features = Array2::zeros((spans.len(), frame_features.ncols()));
    for (mut row, s) in clip_features.rows_mut().into_iter().zip(&spans) {
        row.assign(&column_max(
            frame_features.slice(ndarray::s![s.start - 1..s.end, ..]),
        ));
    }
    ClipSet {
        clip_features,
        clip_weights: Vec::new(),
        spans,
    }
}

/// Element-wise maximum over words.
pub fn pool_sentence(word_features: &Array2<f64>) -> Array1<f64> {
    column_max(word_features.view())
}

/// Graph version of [`slice_clips`]: one pooled row per span.
pub fn slice_clips_graph(g: &mut Graph, frames: Var, spans: &[Span]) -> Var {
    let rows: Vec<Var> = spans
        .iter()
        .map(|s| {
            let window = g.slice_rows(frames, s.start - 1, s.len());
            g.max_rows(window)
        })
        .collect();
    if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)
    }
}

/// Per-example handles consumed by the graph-level losses.
#[derive(Clone, Debug)]
pub struct ExampleVars {
    /// `N × d` pooled clips.
    pub clips: Var,
    pub clip_weights: Vec<f64>,
    /// `1 × d` max over all frames.
    pub video: Var,
    /// `1 × d` max over all words.
    pub sentence: Var,
    /// `1 × L_v`
    pub guidance: Var,
    pub frame_weights: Vec<f64>,
}

fn check_batch(batch: &[ExampleVars]) -> Result<(), AlignError> {
    if batch.len() < 2 {
        return Err(AlignError::BatchTooSmall(batch.len()));
    }
    Ok(())
}

fn sentences(g: &mut Graph, batch: &[ExampleVars]) -> Var {
    let rows: Vec<Var> = batch.iter().map(|e| e.sentence).collect();
    g.concat_rows(&rows)
}

fn reduce(g: &mut Graph, terms: &[Var], count: usize, reduction: Reduction) -> Var {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    match reduction {
        Reduction::Mean => g.scale(total, 1.0 / count as f64),
        Reduction::Sum => total,
    }
}

/// Video-level NCE with in-batch negatives, averaged over videos.
pub fn video_nce_graph(g: &mut Graph, batch: &[ExampleVars]) -> Result<Var, AlignError> {
    check_batch(batch)?;
    let b = batch.len();
    let s = sentences(g, batch);
    let rows: Vec<Var> = batch.iter().map(|e| e.video).collect();
    let v = g.concat_rows(&rows);
    let logits = g.matmul_bt(v, s);
    let ls = g.log_softmax_rows(logits);
    let picked = g.mask(ls, Array2::eye(b));
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Clip-level NCE: positive mass is the sum over clips of the positive
/// query's exponentiated scores. Averaged over videos.
pub fn clip_nce_graph(g: &mut Graph, batch: &[ExampleVars]) -> Result<Var, AlignError> {
    check_batch(batch)?;
    let s = sentences(g, batch);
    let mut terms = Vec::with_capacity(batch.len());
    for (k, e) in batch.iter().enumerate() {
        let logits = g.matmul_bt(e.clips, s);
        let all = g.log_sum_exp(logits);
        let pos = g.slice_cols(logits, k, 1);
        let pos = g.log_sum_exp(pos);
        terms.push(g.sub(all, pos));
    }
    Ok(reduce(g, &terms, batch.len(), Reduction::Mean))
}

/// Label-smoothed target row for one clip.
fn smoothed_targets(b: usize, positive: usize, w: f64) -> Array1<f64> {
    let off = (1.0 - w) / (b as f64 - 1.0);
    Array1::from_shape_fn(b, |j| if j == positive { w } else { off })
}

/// Gaussian label-smoothed clip NCE: per clip, cross-entropy between the
/// softmax over the batch's sentences and a target with `w_i` on the
/// positive query and `(1 - w_i)/(B - 1)` on each negative. Reduced over
/// all clips of all videos.
pub fn gls_nce_graph(
    g: &mut Graph,
    batch: &[ExampleVars],
    reduction: Reduction,
) -> Result<Var, AlignError> {
    check_batch(batch)?;
    let b = batch.len();
    let s = sentences(g, batch);
    let mut terms = Vec::with_capacity(b);
    let mut clips = 0;
    for (k, e) in batch.iter().enumerate() {
        let n = g.shape(e.clips).0;
        if e.clip_weights.len() != n {
            return Err(AlignError::Mismatch(format!(
                "example {k} has {n} clips but {} weights",
                e.clip_weights.len()
            )));
        }
        let logits = g.matmul_bt(e.clips, s);
        let ls = g.log_softmax_rows(logits);
        let mut targets = Array2::zeros((n, b));
        for (mut row, &w) in targets.rows_mut().into_iter().zip(&e.clip_weights) {
            row.assign(&smoothed_targets(b, k, w));
        }
        let weighted = g.mask(ls, -targets);
        terms.push(g.sum_all(weighted));
        clips += n;
    }
    Ok(reduce(g, &terms, clips, reduction))
}

fn kl_target(weights: &[f64], target: KlTarget) -> Vec<f64> {
    match target {
        KlTarget::Normalized => {
            let z: f64 = weights.iter().sum();
            weights.iter().map(|w| w / z).collect()
        }
        KlTarget::Unnormalized => weights.to_vec(),
    }
}

/// `Σ_i t_i (ln t_i - ln a_i)` for one video, with `0 ln 0 = 0`.
fn kl_graph(g: &mut Graph, attention: Var, weights: &[f64], target: KlTarget) -> Var {
    let t = kl_target(weights, target);
    let entropy_part: f64 = t.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum();
    let tv = g.constant(Array2::from_shape_vec((1, t.len()), t).expect("row"));
    let log_a = g.ln_floor(attention, ATTENTION_FLOOR);
    let cross = g.dot(tv, log_a);
    let neg = g.scale(cross, -1.0);
    let c = g.constant(Array2::from_elem((1, 1), entropy_part));
    g.add(c, neg)
}

/// Attention-guidance KL, summed over frames and reduced over videos.
pub fn qag_kl_graph(
    g: &mut Graph,
    batch: &[ExampleVars],
    target: KlTarget,
    reduction: Reduction,
) -> Result<Var, AlignError> {
    if batch.is_empty() {
        return Err(AlignError::BatchTooSmall(0));
    }
    let mut terms = Vec::with_capacity(batch.len());
    for (k, e) in batch.iter().enumerate() {
        let len = g.shape(e.guidance).1;
        if e.frame_weights.len() != len {
            return Err(AlignError::Mismatch(format!(
                "example {k} has {len} attention entries but {} frame weights",
                e.frame_weights.len()
            )));
        }
        terms.push(kl_graph(g, e.guidance, &e.frame_weights, target));
    }
    Ok(reduce(g, &terms, batch.len(), reduction))
}

/// Handles for the combined loss and its two parts.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub contrastive: Var,
    pub qag: Option<Var>,
}

/// Contrastive term selected by `cfg.variant` plus `qag_weight` times the
/// attention KL.
pub fn total_loss_graph(
    g: &mut Graph,
    batch: &[ExampleVars],
    cfg: &LossConfig,
) -> Result<LossVars, AlignError> {
    let contrastive = match cfg.variant {
        LossVariant::VideoNce => video_nce_graph(g, batch)?,
        LossVariant::ClipNce => clip_nce_graph(g, batch)?,
        LossVariant::GlsNce => gls_nce_graph(g, batch, cfg.reduction)?,
    };
    if cfg.qag_weight == 0.0 {
        return Ok(LossVars {
            total: contrastive,
            contrastive,
            qag: None,
        });
    }
    let qag = qag_kl_graph(g, batch, cfg.kl_target, cfg.reduction)?;
    let weighted = if cfg.qag_weight == 1.0 {
        qag
    } else {
        g.scale(qag, cfg.qag_weight)
    };
    let total = g.add(contrastive, weighted);
    Ok(LossVars {
        total,
        contrastive,
        qag: Some(qag),
    })
}

/// Array-level inputs for one example of a loss batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ExampleLossInput {
    pub clips: ClipSet,
    pub video_feature: Array1<f64>,
    pub sentence: Array1<f64>,
    pub guidance: Vec<f64>,
    pub frame_weights: Vec<f64>,
}

impl ExampleLossInput {
    /// Builds the clip set, pooled features and Gaussian weights from
    /// joint-space outputs and a glance index.
    pub fn from_features(
        word_features: &Array2<f64>,
        frame_features: &Array2<f64>,
        guidance: Vec<f64>,
        glance_idx: f64,
        cfg: &GaussianConfig,
    ) -> Self {
        let len = frame_features.nrows();
        Self {
            clips: slice_clips(frame_features, cfg).with_weights(len, glance_idx, cfg),
            video_feature: column_max(frame_features.view()),
            sentence: pool_sentence(word_features),
            guidance,
            frame_weights: frame_weights(len, glance_idx, cfg.sigma),
        }
    }
}

/// Loss values reported separately for logging.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub contrastive: f64,
    pub qag: f64,
}

fn row(g: &mut Graph, v: &Array1<f64>) -> Var {
    g.constant(v.clone().insert_axis(Axis(0)))
}

fn bind_batch(g: &mut Graph, batch: &[ExampleLossInput]) -> Vec<ExampleVars> {
    batch
        .iter()
        .map(|e| ExampleVars {
            clips: g.constant(e.clips.clip_features.clone()),
            clip_weights: e.clips.clip_weights.clone(),
            video: row(g, &e.video_feature),
            sentence: row(g, &e.sentence),
            guidance: g.constant(
                Array2::from_shape_vec((1, e.guidance.len()), e.guidance.clone()).expect("row"),
            ),
            frame_weights: e.frame_weights.clone(),
        })
        .collect()
}

pub fn video_nce_loss(batch: &[ExampleLossInput]) -> Result<f64, AlignError> {
    let mut g = Graph::new();
    let vars = bind_batch(&mut g, batch);
    let l = video_nce_graph(&mut g, &vars)?;
    Ok(g.scalar(l))
}

pub fn clip_nce_loss(batch: &[ExampleLossInput]) -> Result<f64, AlignError> {
    let mut g = Graph::new();
    let vars = bind_batch(&mut g, batch);
    let l = clip_nce_graph(&mut g, &vars)?;
    Ok(g.scalar(l))
}

pub fn gls_nce_loss(batch: &[ExampleLossInput], reduction: Reduction) -> Result<f64, AlignError> {
    let mut g = Graph::new();
    let vars = bind_batch(&mut g, batch);
    let l = gls_nce_graph(&mut g, &vars, reduction)?;
    Ok(g.scalar(l))
}

/// KL between the (normalized) frame weights and the attention vector.
pub fn qag_kl_loss(
    attention: &[f64],
    weights: &[f64],
    target: KlTarget,
) -> Result<f64, AlignError> {
    if attention.len() != weights.len() {
        return Err(AlignError::Mismatch(format!(
            "{} attention entries vs {} weights",
            attention.len(),
            weights.len()
        )));
    }
    let mut g = Graph::new();
    let a =
        g.constant(Array2::from_shape_vec((1, attention.len()), attention.to_vec()).expect("row"));
    let l = kl_graph(&mut g, a, weights, target);
    Ok(g.scalar(l))
}

pub fn total_loss(
    batch: &[ExampleLossInput],
    cfg: &LossConfig,
) -> Result<LossBreakdown, AlignError> {
    let mut g = Graph::new();
    let vars = bind_batch(&mut g, batch);
    let l = total_loss_graph(&mut g, &vars, cfg)?;
    Ok(LossBreakdown {
        total: g.scalar(l.total),
        contrastive: g.scalar(l.contrastive),
        qag: l.qag.map_or(0.0, |q| g.scalar(q)),
    })
}
