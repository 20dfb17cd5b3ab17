//! Seeded synthetic benchmark: every query names an action and an object,
//! and frames inside the annotated moment carry that pair's visual
//! pattern on top of noise. Background frames may carry other pairs'
//! patterns as distractor events.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, FullAnnotation, VideoFeatures, WordVectorTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_videos: usize,
    /// Inclusive range of frame counts `L_v`.
    pub frames: (usize, usize),
    pub feature_dim: usize,
    pub word_dim: usize,
    pub n_actions: usize,
    pub n_objects: usize,
    /// Inclusive range of the moment length as a fraction of `L_v`.
    pub moment_fraction: (f64, f64),
    /// Norm of the planted pattern added to each moment frame.
    pub amplitude: f64,
    /// Expected norm of the per-frame Gaussian noise.
    pub noise: f64,
    /// Norm of the per-video constant scene vector.
    pub scene: f64,
    /// Distractor events placed outside the moment, per video.
    pub distractors: usize,
    /// Probability that a distractor shares the query's action or object.
    pub related_distractors: f64,
    pub seconds_per_frame: f64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 100,
            frames: (24, 32),
            feature_dim: 32,
            word_dim: 32,
            n_actions: 16,
            n_objects: 16,
            moment_fraction: (0.2, 0.45),
            amplitude: 1.0,
            noise: 1.0,
            scene: 0.5,
            distractors: 1,
            related_distractors: 0.0,
            seconds_per_frame: 1.0,
            id_prefix: "syn".into(),
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Config(m.to_string()));
        let (lo, hi) = self.frames;
        let (flo, fhi) = self.moment_fraction;
        if lo == 0 || lo > hi {
            return err("frame range must satisfy 1 <= min <= max");
        }
        if !(flo > 0.0 && flo <= fhi) {
            return err("moment fraction range must satisfy 0 < min <= max");
        }
        if fhi > 1.0 {
            return err("moment length range exceeds the video length");
        }
        if self.feature_dim == 0 || self.word_dim == 0 {
            return err("feature and word dimensions must be positive");
        }
        if self.n_actions == 0 || self.n_objects == 0 {
            return err("vocabulary must contain at least one action and one object");
        }
        if !(self.amplitude.is_finite() && self.noise >= 0.0 && self.scene >= 0.0) {
            return err("amplitude, noise and scene must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.related_distractors) {
            return err("related_distractors must be a probability");
        }
        if !(self.seconds_per_frame > 0.0) {
            return err("seconds_per_frame must be positive");
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`]. `patterns[k]` is the unit vector
/// planted in the moment of `annotations[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub videos: Vec<VideoFeatures>,
    pub annotations: Vec<FullAnnotation>,
    pub words: WordVectorTable,
    pub patterns: Vec<Array1<f64>>,
}

const FILLERS: [&str; 4] = ["a", "person", "the", "then"];

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal))
}

fn unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    let v = gaussian_vec(rng, dim);
    let n = v.dot(&v).sqrt().max(1e-12);
    v / n
}

pub fn generate_synthetic<R: Rng + ?Sized>(
    config: &SynthConfig,
    rng: &mut R,
) -> Result<SyntheticDataset, DataError> {
    config.validate()?;
    let dfeat = config.feature_dim;

    let actions: Vec<String> = (0..config.n_actions)
        .map(|i| format!("act{i:02}"))
        .collect();
    let objects: Vec<String> = (0..config.n_objects)
        .map(|i| format!("obj{i:02}"))
        .collect();
    let mut words = WordVectorTable::new(config.word_dim);
    for w in FILLERS
        .iter()
        .map(|s| s.to_string())
        .chain(actions.iter().cloned())
        .chain(objects.iter().cloned())
    {
        let v = unit(rng, config.word_dim);
        words.insert(w, v.to_vec());
    }
    let action_visual: Vec<Array1<f64>> = (0..config.n_actions).map(|_| unit(rng, dfeat)).collect();
    let object_visual: Vec<Array1<f64>> = (0..config.n_objects).map(|_| unit(rng, dfeat)).collect();
    let pattern_of = |a: usize, o: usize| {
        let p = &action_visual[a] + &object_visual[o];
        let n = p.dot(&p).sqrt().max(1e-12);
        p / n
    };

    let noise_std = config.noise / (dfeat as f64).sqrt();
    let mut videos = Vec::with_capacity(config.n_videos);
    let mut annotations = Vec::with_capacity(config.n_videos);
    let mut patterns = Vec::with_capacity(config.n_videos);
    let width = config.n_videos.max(1).to_string().len().max(4);

    for k in 0..config.n_videos {
        let len_v = rng.gen_range(config.frames.0..=config.frames.1);
        let frac = rng.gen_range(config.moment_fraction.0..=config.moment_fraction.1);
        let moment = ((frac * len_v as f64).round() as usize).clamp(1, len_v);
        let start = rng.gen_range(0..=len_v - moment);
        let (a, o) = (
            rng.gen_range(0..config.n_actions),
            rng.gen_range(0..config.n_objects),
        );
        let pattern = pattern_of(a, o);

        let scene = unit(rng, dfeat) * config.scene;
        let mut feats = Array2::<f64>::zeros((len_v, dfeat));
        for mut row in feats.rows_mut() {
            let noise = gaussian_vec(rng, dfeat) * noise_std;
            row.assign(&(&scene + &noise));
        }
        for t in start..start + moment {
            let mut row = feats.row_mut(t);
            row += &(&pattern * config.amplitude);
        }

        // Distractors go into whichever background gap still has room.
        let mut gaps = vec![(0usize, start), (start + moment, len_v)];
        for _ in 0..config.distractors {
            gaps.retain(|(s, e)| e > s);
            let Some(&(gs, ge)) = gaps.choose(rng) else {
                break;
            };
            let dlen = ((rng.gen_range(config.moment_fraction.0..=config.moment_fraction.1)
                * len_v as f64)
                .round() as usize)
                .clamp(1, ge - gs);
            let ds = rng.gen_range(gs..=ge - dlen);
            let (mut da, mut dob) = (
                rng.gen_range(0..config.n_actions),
                rng.gen_range(0..config.n_objects),
            );
            let keep_action = rng.gen_bool(0.5);
            if config.related_distractors > 0.0 && rng.gen_bool(config.related_distractors) {
                if keep_action {
                    da = a;
                } else {
                    dob = o;
                }
            }
            if (da, dob) == (a, o) {
                if (keep_action && config.n_objects > 1) || config.n_actions == 1 {
                    dob = (dob + 1) % config.n_objects;
                } else {
                    da = (da + 1) % config.n_actions;
                }
            }
            let dp = pattern_of(da, dob) * config.amplitude;
            for t in ds..ds + dlen {
                let mut row = feats.row_mut(t);
                row += &dp;
            }
            gaps.retain(|&g| g != (gs, ge));
            gaps.push((gs, ds));
            gaps.push((ds + dlen, ge));
        }

        let video_id = format!("{}{:0width$}", config.id_prefix, k, width = width);
        let spf = config.seconds_per_frame;
        let duration = len_v as f64 * spf;
        let features = VideoFeatures::new(video_id.clone(), feats.mapv(|v| v as f32), duration)?;
        videos.push(features);
        annotations.push(FullAnnotation {
            video_id,
            query: format!("a person {} the {}", actions[a], objects[o]),
            start: start as f64 * spf,
            end: (start + moment) as f64 * spf,
            duration,
        });
        patterns.push(pattern);
    }

    Ok(SyntheticDataset {
        videos,
        annotations,
        words,
        patterns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::features::write_features;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_video_moment_within_duration() {
        let cfg = SynthConfig {
            n_videos: 1,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ds.annotations.len(), 1);
        let a = &ds.annotations[0];
        assert!(0.0 <= a.start && a.start <= a.end && a.end <= a.duration);
        assert_eq!(ds.videos[0].duration, a.duration);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig {
            n_videos: 8,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.videos.iter().zip(&b.videos) {
            assert_eq!(write_features(x), write_features(y));
        }
        let c = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a.videos[0].features, c.videos[0].features);
    }

    #[test]
    fn oversized_moment_is_config_error() {
        let cfg = SynthConfig {
            moment_fraction: (0.5, 1.5),
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn planted_pattern_is_stronger_inside_moment() {
        let cfg = SynthConfig {
            n_videos: 50,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for ((v, a), p) in ds.videos.iter().zip(&ds.annotations).zip(&ds.patterns) {
            for (t, row) in v.features.rows().into_iter().enumerate() {
                let d: f64 = row.iter().zip(p.iter()).map(|(x, y)| *x as f64 * y).sum();
                let time = t as f64 * cfg.seconds_per_frame;
                if time >= a.start && time < a.end {
                    inside += d;
                    n_in += 1;
                } else {
                    outside += d;
                    n_out += 1;
                }
            }
        }
        let (mi, mo) = (inside / n_in as f64, outside / n_out as f64);
        assert!(mi > mo, "inside mean {mi} should exceed outside mean {mo}");
    }

    #[test]
    fn queries_embed_without_oov() {
        let ds =
            generate_synthetic(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for a in &ds.annotations {
            for t in crate::data::tokenize(&a.query) {
                assert!(ds.words.get(&t).is_some(), "token {t} missing");
            }
        }
    }
}
