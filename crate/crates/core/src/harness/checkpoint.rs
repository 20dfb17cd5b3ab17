//! Binary checkpoint format:
//!
//! ```text
//! "VGCK" | u32 version | u32 len, model config JSON | u32 len, state JSON
//! | u32 record count | records
//! record = u32 name len | name bytes | u32 rank | u32 dims[rank] | f32 payload
//! ```
//!
//! All integers and floats are little-endian. Optimizer moments are stored
//! as records prefixed `adam.first/` and `adam.second/`.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::Schedule;
use super::{HarnessError, TrainState};
use crate::model::{ModelConfig, Parameters};

const MAGIC: &[u8; 4] = b"VGCK";
const VERSION: u32 = 1;
const FIRST: &str = "adam.first/";
const SECOND: &str = "adam.second/";

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    epoch: usize,
    schedule: Schedule,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

fn put_record(out: &mut Vec<u8>, name: &str, dims: &[usize], value: &Array2<f64>) {
    put_block(out, name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for &v in value.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_block(
        &mut out,
        serde_json::to_string(&state.model)
            .expect("config serializes")
            .as_bytes(),
    );
    let meta = Meta {
        step: state.step,
        epoch: state.epoch,
        schedule: state.schedule,
    };
    put_block(
        &mut out,
        serde_json::to_string(&meta)
            .expect("state serializes")
            .as_bytes(),
    );
    put_u32(&mut out, (3 * state.params.len()) as u32);
    for (prefix, set) in [
        ("", &state.params),
        (FIRST, &state.first),
        (SECOND, &state.second),
    ] {
        for (name, p) in set.iter() {
            put_record(&mut out, &format!("{prefix}{name}"), &p.dims, &p.value);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], HarnessError> {
        if self.bytes.len() - self.pos < n {
            return Err(HarnessError::Checkpoint(format!(
                "truncated at byte {}: wanted {n} more bytes",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, HarnessError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn block(&mut self) -> Result<&'a [u8], HarnessError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Checkpoint(msg.into())
}

/// Parses a checkpoint. With `expected` set, a different model config is
/// rejected.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<TrainState, HarnessError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let model: ModelConfig =
        serde_json::from_slice(r.block()?).map_err(|e| bad(format!("model config: {e}")))?;
    if let Some(want) = expected {
        if want != &model {
            return Err(HarnessError::ConfigMismatch {
                expected: Box::new(want.clone()),
                found: Box::new(model),
            });
        }
    }
    let meta: Meta = serde_json::from_slice(r.block()?).map_err(|e| bad(format!("state: {e}")))?;
    let count = r.u32()? as usize;
    let (mut params, mut first, mut second) =
        (Parameters::new(), Parameters::new(), Parameters::new());
    for _ in 0..count {
        let name = std::str::from_utf8(r.block()?)
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let shape = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(bad(format!("`{name}` has unsupported rank {rank}"))),
        };
        let payload = r.take(4 * shape.0 * shape.1)?;
        let values: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let value = Array2::from_shape_vec(shape, values).expect("payload sized from dims");
        if let Some(n) = name.strip_prefix(FIRST) {
            first.insert(n, dims, value);
        } else if let Some(n) = name.strip_prefix(SECOND) {
            second.insert(n, dims, value);
        } else {
            params.insert(name, dims, value);
        }
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    for set in [&params, &first, &second] {
        set.check_against(&model)?;
    }
    Ok(TrainState {
        model,
        params,
        first,
        second,
        step: meta.step,
        epoch: meta.epoch,
        schedule: meta.schedule,
    })
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<(), HarnessError> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(state))
        .map_err(|e| crate::data::DataError::io(path, e).into())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<TrainState, HarnessError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| crate::data::DataError::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
