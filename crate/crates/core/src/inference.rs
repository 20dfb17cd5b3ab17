//! Attention-anchored proposal ranking and the plain sliding-window
//! baseline.
//!
//! Frame indices are 1-based and spans inclusive.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::rngs::mock::StepRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alignment::pool_sentence;
use crate::data::{load_jsonl, write_jsonl, DataError, QueryTokens, Validate, VideoFeatures};
use crate::model::{forward, CrossModalOutput, Mode, ModelConfig, ModelError, Parameters};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid proposal config: {0}")]
    Config(String),
    #[error("could not write predictions: {0}")]
    Io(#[from] DataError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalMode {
    /// Keep only windows that contain the attention anchor.
    #[default]
    Qagi,
    /// Score every window.
    Sliding,
}

impl ProposalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ProposalMode::Qagi => "qagi",
            ProposalMode::Sliding => "sliding",
        }
    }
}

impl std::str::FromStr for ProposalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "qagi" => Ok(ProposalMode::Qagi),
            "sliding" => Ok(ProposalMode::Sliding),
            other => Err(format!(
                "unknown proposal mode `{other}` (expected qagi or sliding)"
            )),
        }
    }
}

/// Step between consecutive windows of one length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stride {
    /// `max(1, round(fraction · window_len))` frames.
    Fraction(f64),
    Frames(usize),
}

impl Stride {
    pub fn frames(&self, window: usize) -> usize {
        match *self {
            Stride::Fraction(f) => ((f * window as f64).round() as usize).max(1),
            Stride::Frames(n) => n.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub window_fractions: Vec<f64>,
    pub stride: Stride,
    pub mode: ProposalMode,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            window_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
            stride: Stride::Fraction(0.5),
            mode: ProposalMode::Qagi,
        }
    }
}

impl ProposalConfig {
    pub fn with_mode(mut self, mode: ProposalMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.window_fractions.is_empty() {
            return Err(InferenceError::Config("no window fractions".into()));
        }
        for pair in self.window_fractions.windows(2) {
            if pair[0] >= pair[1] {
                return Err(InferenceError::Config(
                    "window fractions must be sorted and distinct".into(),
                ));
            }
        }
        if let Some(f) = self
            .window_fractions
            .iter()
            .find(|f| !(**f > 0.0 && **f <= 1.0))
        {
            return Err(InferenceError::Config(format!(
                "window fraction {f} outside (0, 1]"
            )));
        }
        if let Stride::Fraction(f) = self.stride {
            if !(f > 0.0 && f.is_finite()) {
                return Err(InferenceError::Config(format!(
                    "stride fraction {f} must be positive"
                )));
            }
        }
        Ok(())
    }

    /// Distinct window lengths in frames for a video of `len` frames.
    pub fn window_lengths(&self, len: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .window_fractions
            .iter()
            .map(|f| ((f * len as f64).round() as usize).clamp(1, len))
            .collect();
        set.into_iter().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Proposal {
    pub start_idx: usize,
    pub end_idx: usize,
}

impl Proposal {
    pub fn len(&self) -> usize {
        self.end_idx + 1 - self.start_idx
    }

    pub fn is_empty(&self) -> bool {
        self.end_idx < self.start_idx
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.start_idx <= frame && frame <= self.end_idx
    }

    /// `[(start_idx - 1)·duration/len, end_idx·duration/len]` in seconds.
    pub fn to_seconds(&self, len: usize, duration: f64) -> (f64, f64) {
        let per = duration / len as f64;
        (
            (self.start_idx - 1) as f64 * per,
            (self.end_idx as f64 * per).min(duration),
        )
    }
}

/// Smallest 1-based index attaining the maximum of `attention`.
pub fn select_anchor(attention: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in attention.iter().enumerate() {
        if a > attention[best] {
            best = i;
        }
    }
    best + 1
}

/// All windows of every configured length, in (length, start) order.
/// When stepping stops short of the last frame, one extra window ending
/// on the last frame is added so the tail is always covered.
fn sliding_windows(len: usize, cfg: &ProposalConfig) -> Vec<Proposal> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for w in cfg.window_lengths(len) {
        let step = cfg.stride.frames(w);
        let mut start = 1;
        let mut last_end = 0;
        while start + w - 1 <= len {
            let p = Proposal {
                start_idx: start,
                end_idx: start + w - 1,
            };
            if seen.insert(p) {
                out.push(p);
            }
            last_end = p.end_idx;
            start += step;
        }
        if last_end < len {
            let p = Proposal {
                start_idx: len + 1 - w,
                end_idx: len,
            };
            if seen.insert(p) {
                out.push(p);
            }
        }
    }
    out
}

/// Candidate windows for a video of `len` frames. With an anchor only
/// windows containing it survive; an empty result falls back to the whole
/// video.
pub fn generate_proposals(
    len: usize,
    anchor: Option<usize>,
    cfg: &ProposalConfig,
) -> Vec<Proposal> {
    let all = sliding_windows(len, cfg);
    let mut kept: Vec<Proposal> = match anchor {
        Some(a) => all.into_iter().filter(|p| p.contains(a)).collect(),
        None => all,
    };
    if kept.is_empty() {
        kept.push(Proposal {
            start_idx: 1,
            end_idx: len,
        });
    }
    kept
}

/// Max-pooled proposal frames dotted with the sentence feature.
pub fn score_proposal(
    frame_features: &Array2<f64>,
    proposal: Proposal,
    sentence: &Array1<f64>,
) -> f64 {
    let window = frame_features.slice(ndarray::s![proposal.start_idx - 1..proposal.end_idx, ..]);
    let pooled = window.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b));
    pooled.dot(sentence)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub anchor_idx: usize,
    pub proposal: Proposal,
}

/// Ranks proposals on precomputed joint-space features. Ties go to the
/// earliest start, then the shortest window.
pub fn rank(output: &CrossModalOutput, duration: f64, cfg: &ProposalConfig) -> RetrievalResult {
    let len = output.frame_features.nrows();
    let anchor_idx = select_anchor(&output.guidance_attention);
    let anchor = (cfg.mode == ProposalMode::Qagi).then_some(anchor_idx);
    let sentence = pool_sentence(&output.word_features);
    let mut best: Option<(f64, Proposal)> = None;
    for p in generate_proposals(len, anchor, cfg) {
        let s = score_proposal(&output.frame_features, p, &sentence);
        let better = match best {
            None => true,
            Some((bs, bp)) => {
                s > bs || (s == bs && (p.start_idx, p.len()) < (bp.start_idx, bp.len()))
            }
        };
        if better {
            best = Some((s, p));
        }
    }
    let (score, proposal) = best.expect("at least one proposal");
    let (start, end) = proposal.to_seconds(len, duration);
    RetrievalResult {
        start,
        end,
        score,
        anchor_idx,
        proposal,
    }
}

/// Eval-mode forward pass followed by [`rank`].
pub fn retrieve(
    video: &VideoFeatures,
    query: &QueryTokens,
    params: &Parameters,
    model: &ModelConfig,
    cfg: &ProposalConfig,
) -> Result<RetrievalResult, InferenceError> {
    retrieve_with_output(video, query, params, model, cfg).map(|(r, _)| r)
}

/// Like [`retrieve`] but also returns the joint-space features.
pub fn retrieve_with_output(
    video: &VideoFeatures,
    query: &QueryTokens,
    params: &Parameters,
    model: &ModelConfig,
    cfg: &ProposalConfig,
) -> Result<(RetrievalResult, CrossModalOutput), InferenceError> {
    cfg.validate()?;
    // Eval mode never draws from the source.
    let mut rng = StepRng::new(0, 0);
    let mut out = forward(&[(query, video)], params, model, Mode::Eval, &mut rng)?;
    let output = out.pop().expect("one output per example");
    Ok((rank(&output, video.duration, cfg), output))
}

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub query: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub anchor_idx: usize,
    pub mode: ProposalMode,
}

impl Prediction {
    pub fn new(video_id: &str, query: &str, result: &RetrievalResult, mode: ProposalMode) -> Self {
        Self {
            video_id: video_id.to_string(),
            query: query.to_string(),
            start: result.start,
            end: result.end,
            score: result.score,
            anchor_idx: result.anchor_idx,
            mode,
        }
    }
}

impl Validate for Prediction {
    fn validate(&self) -> Result<(), DataError> {
        if !(self.start.is_finite() && self.end.is_finite() && self.start <= self.end) {
            return Err(DataError::Validation {
                video_id: self.video_id.clone(),
                message: format!(
                    "prediction [{}, {}] is not an interval",
                    self.start, self.end
                ),
            });
        }
        Ok(())
    }
}

pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &[Prediction],
) -> Result<(), DataError> {
    write_jsonl(path, predictions)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, DataError> {
    load_jsonl(path.as_ref())
}
