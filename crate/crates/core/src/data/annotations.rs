use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::DataError;

/// A fully annotated example: the moment `[start, end]` (seconds) of
/// video `video_id` described by `query`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullAnnotation {
    pub video_id: String,
    pub query: String,
    pub start: f64,
    pub end: f64,
    pub duration: f64,
}

/// A glance-annotated example. `eval_start`/`eval_end` are carried for
/// evaluation only; nothing on the training path reads them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlanceAnnotation {
    pub video_id: String,
    pub query: String,
    pub glance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_end: Option<f64>,
    pub duration: f64,
}

pub(crate) trait Validate {
    fn validate(&self) -> Result<(), DataError>;
}

fn invalid(video_id: &str, message: impl Into<String>) -> DataError {
    DataError::Validation {
        video_id: video_id.to_string(),
        message: message.into(),
    }
}

fn check_query(video_id: &str, query: &str) -> Result<(), DataError> {
    if query.trim().is_empty() {
        return Err(invalid(video_id, "query is empty"));
    }
    Ok(())
}

impl Validate for FullAnnotation {
    fn validate(&self) -> Result<(), DataError> {
        check_query(&self.video_id, &self.query)?;
        let (s, e, d) = (self.start, self.end, self.duration);
        if !(s.is_finite() && e.is_finite() && d.is_finite()) {
            return Err(invalid(&self.video_id, "non-finite time value"));
        }
        if !(0.0 <= s && s <= e && e <= d) {
            return Err(invalid(
                &self.video_id,
                format!("need 0 <= start <= end <= duration, got start={s} end={e} duration={d}"),
            ));
        }
        Ok(())
    }
}

impl Validate for GlanceAnnotation {
    fn validate(&self) -> Result<(), DataError> {
        check_query(&self.video_id, &self.query)?;
        let (g, d) = (self.glance, self.duration);
        if !(g.is_finite() && d.is_finite()) {
            return Err(invalid(&self.video_id, "non-finite time value"));
        }
        if !(0.0 <= g && g <= d) {
            return Err(invalid(
                &self.video_id,
                format!("need 0 <= glance <= duration, got glance={g} duration={d}"),
            ));
        }
        match (self.eval_start, self.eval_end) {
            (Some(s), Some(e)) => {
                if !(s <= g && g <= e) {
                    return Err(invalid(
                        &self.video_id,
                        format!("glance {g} outside evaluation bounds [{s}, {e}]"),
                    ));
                }
            }
            (None, None) => {}
            _ => {
                return Err(invalid(
                    &self.video_id,
                    "eval_start and eval_end must appear together",
                ))
            }
        }
        Ok(())
    }
}

impl GlanceAnnotation {
    /// The held-out moment, if this record carries one.
    pub fn eval_bounds(&self) -> Option<(f64, f64)> {
        self.eval_start.zip(self.eval_end)
    }
}

pub(crate) fn load_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

/// Reads a JSON Lines file of full annotations in file order. Blank
/// lines are ignored.
pub fn load_full_annotations(path: impl AsRef<Path>) -> Result<Vec<FullAnnotation>, DataError> {
    load_jsonl(path.as_ref())
}

/// Reads a JSON Lines file of glance annotations in file order.
pub fn load_glance_annotations(path: impl AsRef<Path>) -> Result<Vec<GlanceAnnotation>, DataError> {
    load_jsonl(path.as_ref())
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("annotation records serialize");
        writeln!(w, "{line}").map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// Re-annotates a full example with a glance drawn uniformly from
/// `[start, end]`.
pub fn sample_glance<R: Rng + ?Sized>(ann: &FullAnnotation, rng: &mut R) -> GlanceAnnotation {
    let u: f64 = rng.gen();
    let glance = (ann.start + u * (ann.end - ann.start)).clamp(ann.start, ann.end);
    GlanceAnnotation {
        video_id: ann.video_id.clone(),
        query: ann.query.clone(),
        glance,
        eval_start: Some(ann.start),
        eval_end: Some(ann.end),
        duration: ann.duration,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn full(start: f64, end: f64) -> FullAnnotation {
        FullAnnotation {
            video_id: "v".into(),
            query: "q".into(),
            start,
            end,
            duration: 10.0,
        }
    }

    #[test]
    fn parses_full_line() {
        let f = write_tmp(
            r#"{"video_id":"v1","query":"a man runs","start":2.0,"end":8.0,"duration":10.0}"#,
        );
        let anns = load_full_annotations(f.path()).unwrap();
        assert_eq!(
            anns,
            vec![FullAnnotation {
                video_id: "v1".into(),
                query: "a man runs".into(),
                start: 2.0,
                end: 8.0,
                duration: 10.0
            }]
        );
    }

    #[test]
    fn inverted_bounds_fail_validation() {
        let f = write_tmp(r#"{"video_id":"v9","query":"x","start":2.0,"end":1.0,"duration":10.0}"#);
        match load_full_annotations(f.path()) {
            Err(DataError::Validation { video_id, .. }) => assert_eq!(video_id, "v9"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp(concat!(
            r#"{"video_id":"v1","query":"a","start":0.0,"end":1.0,"duration":2.0}"#,
            "\n{not json\n"
        ));
        match load_full_annotations(f.path()) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected malformed error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = write_tmp("");
        assert!(load_full_annotations(f.path()).unwrap().is_empty());
        assert!(load_glance_annotations(f.path()).unwrap().is_empty());
    }

    #[test]
    fn blank_query_rejected() {
        let f =
            write_tmp(r#"{"video_id":"v1","query":"   ","start":0.0,"end":1.0,"duration":2.0}"#);
        assert!(matches!(
            load_full_annotations(f.path()),
            Err(DataError::Validation { .. })
        ));
    }

    #[test]
    fn glance_outside_eval_bounds_rejected() {
        let f = write_tmp(
            r#"{"video_id":"v1","query":"a","glance":5.0,"eval_start":1.0,"eval_end":2.0,"duration":9.0}"#,
        );
        assert!(matches!(
            load_glance_annotations(f.path()),
            Err(DataError::Validation { .. })
        ));
    }

    #[test]
    fn glance_without_eval_bounds_parses() {
        let f = write_tmp(r#"{"video_id":"v1","query":"a","glance":5.0,"duration":9.0}"#);
        let g = load_glance_annotations(f.path()).unwrap();
        assert_eq!(g[0].eval_bounds(), None);
    }

    #[test]
    fn degenerate_interval_glance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(sample_glance(&full(5.0, 5.0), &mut rng).glance, 5.0);
        }
    }

    #[test]
    fn glance_is_deterministic_per_seed() {
        let a = sample_glance(&full(2.0, 8.0), &mut ChaCha8Rng::seed_from_u64(11));
        let b = sample_glance(&full(2.0, 8.0), &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        assert_eq!(a.eval_bounds(), Some((2.0, 8.0)));
    }

    #[test]
    fn glance_monte_carlo_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let ann = FullAnnotation {
            duration: 1.0,
            ..full(0.0, 1.0)
        };
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let g = sample_glance(&ann, &mut rng).glance;
            assert!((0.0..=1.0).contains(&g));
            sum += g;
        }
        assert!((sum / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn round_trip_jsonl() {
        let anns = vec![full(1.0, 2.5), full(0.0, 10.0)];
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &anns).unwrap();
        assert_eq!(load_full_annotations(f.path()).unwrap(), anns);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let glances: Vec<_> = anns.iter().map(|a| sample_glance(a, &mut rng)).collect();
        write_jsonl(f.path(), &glances).unwrap();
        assert_eq!(load_glance_annotations(f.path()).unwrap(), glances);
    }

    proptest::proptest! {
        #[test]
        fn glance_always_inside_moment(start in 0.0f64..50.0, len in 0.0f64..50.0, seed in 0u64..1000) {
            let ann = FullAnnotation { video_id: "v".into(), query: "q".into(), start, end: start + len, duration: 100.0 };
            let g = sample_glance(&ann, &mut ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert!(ann.start <= g.glance && g.glance <= ann.end);
        }
    }
}
