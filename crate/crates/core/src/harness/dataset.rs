use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::{
    generate_synthetic, load_features, load_glance_annotations, load_word_vectors, sample_glance,
    save_features, save_word_vectors, tokenize_and_embed, write_jsonl, GlanceAnnotation,
    QueryTokens, SynthConfig, VideoFeatures, WordVectorTable,
};

/// One query against one video, ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub video: usize,
    pub annotation: GlanceAnnotation,
    pub tokens: QueryTokens,
}

/// Videos plus the examples that reference them by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoFeatures>,
    pub examples: Vec<Example>,
}

impl Dataset {
    /// Joins annotations to features by `video_id` and embeds each query.
    pub fn new(
        videos: Vec<VideoFeatures>,
        annotations: Vec<GlanceAnnotation>,
        words: &WordVectorTable,
    ) -> Result<Self, HarnessError> {
        let index: HashMap<&str, usize> = videos
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id.as_str(), i))
            .collect();
        let mut examples = Vec::with_capacity(annotations.len());
        for annotation in annotations {
            let video = *index
                .get(annotation.video_id.as_str())
                .ok_or_else(|| HarnessError::MissingVideo(annotation.video_id.clone()))?;
            let tokens = tokenize_and_embed(&annotation.query, words)?;
            examples.push(Example {
                video,
                annotation,
                tokens,
            });
        }
        Ok(Self { videos, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn video_of(&self, example: &Example) -> &VideoFeatures {
        &self.videos[example.video]
    }

    pub fn feature_dim(&self) -> usize {
        self.videos.first().map_or(0, |v| v.dim())
    }

    pub fn longest_video(&self) -> usize {
        self.videos.iter().map(|v| v.len()).max().unwrap_or(0)
    }

    /// Loads `<dir>/<split>.jsonl` together with the features it references.
    pub fn load_split(
        dir: &Path,
        split: &str,
        words: &WordVectorTable,
    ) -> Result<Self, HarnessError> {
        let annotations = load_glance_annotations(dir.join(format!("{split}.jsonl")))?;
        let mut ids: Vec<&str> = annotations.iter().map(|a| a.video_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let videos = ids
            .iter()
            .map(|id| load_features(feature_path(dir, id)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(videos, annotations, words)
    }
}

pub fn feature_path(dir: &Path, video_id: &str) -> PathBuf {
    dir.join("features").join(format!("{video_id}.vgf"))
}

pub fn words_path(dir: &Path) -> PathBuf {
    dir.join("words.txt")
}

pub fn load_words(dir: &Path) -> Result<WordVectorTable, HarnessError> {
    Ok(load_word_vectors(words_path(dir))?)
}

/// Shuffles `0..n` and cuts it into batches of `batch_size`; a trailing
/// batch smaller than 2 is dropped.
pub fn make_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    if n < 2 {
        return Err(HarnessError::DatasetTooSmall(n));
    }
    if batch_size < 2 {
        return Err(HarnessError::Config(format!(
            "batch size must be at least 2, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Synthetic benchmark description: generator settings plus split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    #[serde(default)]
    pub synth: SynthConfig,
    pub splits: SplitSizes,
}

/// Generated train/val/test splits sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Splits {
    pub words: WordVectorTable,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generates one synthetic pool and cuts it into splits in order. Every
/// example gets a glance drawn uniformly inside its moment.
pub fn synthetic_splits<R: Rng + ?Sized>(
    cfg: &BenchmarkConfig,
    rng: &mut R,
) -> Result<Splits, HarnessError> {
    let total = cfg.splits.train + cfg.splits.val + cfg.splits.test;
    let synth = SynthConfig {
        n_videos: total,
        ..cfg.synth.clone()
    };
    let data = generate_synthetic(&synth, rng)?;
    let glances: Vec<GlanceAnnotation> = data
        .annotations
        .iter()
        .map(|a| sample_glance(a, rng))
        .collect();
    let mut videos = data.videos.into_iter();
    let mut anns = glances.into_iter();
    let mut take = |n: usize| -> Result<Dataset, HarnessError> {
        let v: Vec<_> = videos.by_ref().take(n).collect();
        let a: Vec<_> = anns.by_ref().take(n).collect();
        Dataset::new(v, a, &data.words)
    };
    let train = take(cfg.splits.train)?;
    let val = take(cfg.splits.val)?;
    let test = take(cfg.splits.test)?;
    Ok(Splits {
        words: data.words,
        train,
        val,
        test,
    })
}

/// Writes `words.txt`, `features/*.vgf` and `{train,val,test}.jsonl`.
pub fn write_splits(dir: &Path, splits: &Splits) -> Result<(), HarnessError> {
    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| crate::data::DataError::io(&features, e))?;
    save_word_vectors(words_path(dir), &splits.words)?;
    for (name, set) in [
        ("train", &splits.train),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        for v in &set.videos {
            save_features(feature_path(dir, &v.video_id), v)?;
        }
        let anns: Vec<&GlanceAnnotation> = set.examples.iter().map(|e| &e.annotation).collect();
        write_jsonl(dir.join(format!("{name}.jsonl")), &anns)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batches_partition_without_singletons() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = make_batches(10, 4, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = make_batches(9, 4, &mut rng).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4]);
        let mut seen: Vec<usize> = make_batches(10, 3, &mut rng).unwrap().concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn batches_are_seeded() {
        let a = make_batches(20, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_batches(20, 6, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_datasets_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_batches(1, 4, &mut rng),
            Err(HarnessError::DatasetTooSmall(1))
        ));
        assert!(make_batches(5, 1, &mut rng).is_err());
    }

    #[test]
    fn splits_share_vocabulary_and_sizes() {
        let cfg = BenchmarkConfig {
            synth: SynthConfig {
                frames: (8, 10),
                feature_dim: 6,
                word_dim: 4,
                ..Default::default()
            },
            splits: SplitSizes {
                train: 5,
                val: 2,
                test: 3,
            },
        };
        let s = synthetic_splits(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (5, 2, 3));
        for set in [&s.train, &s.val, &s.test] {
            for e in &set.examples {
                let (lo, hi) = e.annotation.eval_bounds().unwrap();
                assert!(lo <= e.annotation.glance && e.annotation.glance <= hi);
                assert_eq!(set.video_of(e).video_id, e.annotation.video_id);
            }
        }
    }

    #[test]
    fn splits_round_trip_through_directory() {
        let cfg = BenchmarkConfig {
            synth: SynthConfig {
                frames: (6, 6),
                feature_dim: 3,
                word_dim: 2,
                ..Default::default()
            },
            splits: SplitSizes {
                train: 3,
                val: 1,
                test: 1,
            },
        };
        let s = synthetic_splits(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_splits(dir.path(), &s).unwrap();
        let words = load_words(dir.path()).unwrap();
        let train = Dataset::load_split(dir.path(), "train", &words).unwrap();
        assert_eq!(train.len(), 3);
        for (a, b) in train.examples.iter().zip(&s.train.examples) {
            assert_eq!(a.annotation, b.annotation);
            assert_eq!(train.video_of(a), s.train.video_of(b));
        }
    }
}
