use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::DataError;

const MAGIC: &[u8; 4] = b"VGF1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// Precomputed per-frame features of one video, `L_v × d_feat`, with the
/// video duration in seconds. Row `i` covers
/// `[i·duration/L_v, (i+1)·duration/L_v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub features: Array2<f32>,
    pub duration: f64,
}

impl VideoFeatures {
    pub fn new(
        video_id: impl Into<String>,
        features: Array2<f32>,
        duration: f64,
    ) -> Result<Self, DataError> {
        let (rows, cols) = features.dim();
        if rows == 0 || cols == 0 {
            return Err(DataError::EmptyFeatures { rows, cols });
        }
        if let Some(((row, col), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { row, col });
        }
        Ok(Self {
            video_id: video_id.into(),
            features,
            duration,
        })
    }

    /// Number of frames `L_v`.
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

/// Serializes to the `VGF1` layout: magic, `u32` rows, `u32` cols,
/// `f64` duration, then row-major `f32` payload, all little-endian.
pub fn write_features(feats: &VideoFeatures) -> Vec<u8> {
    let (rows, cols) = feats.features.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&feats.duration.to_le_bytes());
    for v in feats.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_features(
    bytes: &[u8],
    video_id: impl Into<String>,
) -> Result<VideoFeatures, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(DataError::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let duration = f64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let features = Array2::from_shape_vec((rows, cols), data).expect("length checked");
    VideoFeatures::new(video_id, features, duration)
}

/// Loads a `.vgf` file; the video id is the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<VideoFeatures, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_features(&bytes, id)
}

pub fn save_features(path: impl AsRef<Path>, feats: &VideoFeatures) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, write_features(feats)).map_err(|e| DataError::io(path, e))
}
