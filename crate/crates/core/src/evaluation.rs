//! Temporal IoU, recall at IoU thresholds, mean IoU, and dataset-level
//! reports joining predictions to annotations.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::GlanceAnnotation;
use crate::inference::Prediction;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("interval [{start}, {end}] has end before start")]
    InvertedInterval { start: f64, end: f64 },
    #[error("no IoU values to aggregate")]
    Empty,
    #[error("annotation {video_id:?} / {query:?} has no evaluation bounds")]
    MissingBounds { video_id: String, query: String },
    #[error("join failed: {0}")]
    Join(String),
}

fn check(start: f64, end: f64) -> Result<(), EvalError> {
    if end < start || start.is_nan() || end.is_nan() {
        return Err(EvalError::InvertedInterval { start, end });
    }
    Ok(())
}

/// Intersection over union of two `[start, end]` intervals. Two
/// zero-length intervals score 1 when they coincide and 0 otherwise.
pub fn temporal_iou(pred: (f64, f64), gt: (f64, f64)) -> Result<f64, EvalError> {
    check(pred.0, pred.1)?;
    check(gt.0, gt.1)?;
    let inter = (pred.1.min(gt.1) - pred.0.max(gt.0)).max(0.0);
    let union = (pred.1 - pred.0) + (gt.1 - gt.0) - inter;
    if union <= 0.0 {
        return Ok(if pred == gt { 1.0 } else { 0.0 });
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Percentage of IoUs strictly above each threshold, keyed by the
/// threshold's decimal text (`"0.5"`).
pub fn recall_at_iou(ious: &[f64], thresholds: &[f64]) -> Result<BTreeMap<String, f64>, EvalError> {
    if ious.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(thresholds
        .iter()
        .map(|&t| {
            let hits = ious.iter().filter(|&&iou| iou > t).count();
            (threshold_key(t), 100.0 * hits as f64 / ious.len() as f64)
        })
        .collect())
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Arithmetic mean of the IoUs, as a percentage.
pub fn mean_iou(ious: &[f64]) -> Result<f64, EvalError> {
    if ious.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<String, f64>,
    pub mean_iou: f64,
    pub n_examples: usize,
    pub ious: Vec<f64>,
}

impl EvalReport {
    pub fn from_ious(ious: Vec<f64>, thresholds: &[f64]) -> Result<Self, EvalError> {
        Ok(Self {
            recall_at: recall_at_iou(&ious, thresholds)?,
            mean_iou: mean_iou(&ious)?,
            n_examples: ious.len(),
            ious,
        })
    }

    pub fn recall(&self, threshold: f64) -> Option<f64> {
        self.recall_at.get(&threshold_key(threshold)).copied()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut keys: Vec<(&String, &f64)> = self.recall_at.iter().collect();
        keys.sort_by(|a, b| {
            a.0.parse::<f64>()
                .unwrap_or(0.0)
                .total_cmp(&b.0.parse().unwrap_or(0.0))
        });
        let mut header = String::new();
        let mut values = String::new();
        for (k, v) in keys {
            let name = format!("R@{k}");
            header.push_str(&format!("{name:>8}"));
            values.push_str(&format!("{v:>8.2}"));
        }
        writeln!(f, "{header}{:>8}{:>8}", "mIoU", "n")?;
        write!(f, "{values}{:>8.2}{:>8}", self.mean_iou, self.n_examples)
    }
}

/// Joins predictions to annotations on `(video_id, query)` and scores
/// each pair against the annotation's evaluation bounds.
pub fn evaluate_dataset(
    predictions: &[Prediction],
    annotations: &[GlanceAnnotation],
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    let mut truth: HashMap<(&str, &str), Option<(f64, f64)>> = HashMap::new();
    let mut duplicates = Vec::new();
    for a in annotations {
        if truth
            .insert((&a.video_id, &a.query), a.eval_bounds())
            .is_some()
        {
            duplicates.push(format!("{}/{:?}", a.video_id, a.query));
        }
    }
    if !duplicates.is_empty() {
        return Err(EvalError::Join(format!(
            "duplicate annotations: {}",
            duplicates.join(", ")
        )));
    }

    let mut used: HashMap<(&str, &str), usize> = HashMap::new();
    let mut unmatched = Vec::new();
    let mut ious = Vec::with_capacity(predictions.len());
    for p in predictions {
        let key = (p.video_id.as_str(), p.query.as_str());
        match truth.get(&key) {
            None => unmatched.push(format!("{}/{:?}", p.video_id, p.query)),
            Some(None) => {
                return Err(EvalError::MissingBounds {
                    video_id: p.video_id.clone(),
                    query: p.query.clone(),
                })
            }
            Some(Some(gt)) => {
                *used.entry(key).or_default() += 1;
                ious.push(temporal_iou((p.start, p.end), *gt)?);
            }
        }
    }
    let repeated: Vec<String> = used
        .iter()
        .filter(|(_, &n)| n > 1)
        .map(|((v, q), _)| format!("{v}/{q:?}"))
        .collect();
    let missing: Vec<String> = annotations
        .iter()
        .filter(|a| !used.contains_key(&(a.video_id.as_str(), a.query.as_str())))
        .map(|a| format!("{}/{:?}", a.video_id, a.query))
        .collect();
    let mut problems = Vec::new();
    if !unmatched.is_empty() {
        problems.push(format!(
            "predictions without annotation: {}",
            unmatched.join(", ")
        ));
    }
    if !missing.is_empty() {
        problems.push(format!(
            "annotations without prediction: {}",
            missing.join(", ")
        ));
    }
    if !repeated.is_empty() {
        let mut repeated = repeated;
        repeated.sort();
        problems.push(format!(
            "annotations predicted more than once: {}",
            repeated.join(", ")
        ));
    }
    if !problems.is_empty() {
        return Err(EvalError::Join(problems.join("; ")));
    }
    EvalReport::from_ious(ious, thresholds)
}
