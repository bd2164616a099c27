//! Weight container file format.
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header][f32 LE payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype":"f32","shape":[r,c],"offset":o}`
//! (byte offset into the payload) and holds the model config under
//! `"__config__"`. Tensors are packed in offset order with no padding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ModelConfig, WeightContainer};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const CONFIG_KEY: &str = "__config__";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_weights(weights: &WeightContainer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(weights)?).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightContainer> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub(crate) fn encode(weights: &WeightContainer) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    header.insert(
        CONFIG_KEY.to_string(),
        serde_json::to_value(weights.config())?,
    );
    let mut offset = 0usize;
    for (name, m) in weights.tensors() {
        let entry = TensorEntry {
            dtype: "f32".into(),
            shape: vec![m.rows(), m.cols()],
            offset,
        };
        header.insert(name.clone(), serde_json::to_value(entry)?);
        offset += m.len() * 4;
    }
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for m in weights.tensors().values() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<WeightContainer> {
    let malformed = |msg: String| Error::MalformedHeader(msg);
    if bytes.len() < 8 {
        return Err(malformed(
            "file shorter than the 8-byte length prefix".into(),
        ));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let n = usize::try_from(n).map_err(|_| malformed("header length overflows".into()))?;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| malformed(format!("header length {n} exceeds file size")))?;
    let header: BTreeMap<String, Value> =
        serde_json::from_slice(&bytes[8..header_end]).map_err(|e| malformed(e.to_string()))?;

    let config: ModelConfig = header
        .get(CONFIG_KEY)
        .cloned()
        .ok_or_else(|| malformed("missing __config__".into()))
        .and_then(|v| {
            serde_json::from_value(v).map_err(|e| malformed(format!("__config__: {e}")))
        })?;
    config.validate()?;

    let mut entries: Vec<(String, TensorEntry)> = Vec::new();
    for (name, v) in &header {
        if name == CONFIG_KEY {
            continue;
        }
        let entry: TensorEntry = serde_json::from_value(v.clone())
            .map_err(|e| malformed(format!("entry `{name}`: {e}")))?;
        if entry.dtype != "f32" {
            return Err(malformed(format!("`{name}` has dtype {}", entry.dtype)));
        }
        if entry.shape.len() != 2 {
            return Err(malformed(format!("`{name}` shape must have two dims")));
        }
        entries.push((name.clone(), entry));
    }

    let shapes = config.tensor_shapes();
    for name in shapes.keys() {
        if !entries.iter().any(|(n, _)| n == name) {
            return Err(Error::MissingTensor(name.clone()));
        }
    }
    for (name, entry) in &entries {
        let expected = *shapes
            .get(name)
            .ok_or_else(|| malformed(format!("unexpected tensor `{name}`")))?;
        let found = (entry.shape[0], entry.shape[1]);
        if found != expected {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected,
                found,
            });
        }
    }

    entries.sort_by_key(|(_, e)| e.offset);
    let mut expected_len = 0usize;
    for (name, entry) in &entries {
        if entry.offset != expected_len {
            return Err(malformed(format!(
                "`{name}` offset {} is not contiguous (expected {expected_len})",
                entry.offset
            )));
        }
        expected_len += entry.shape[0] * entry.shape[1] * 4;
    }
    let payload = &bytes[header_end..];
    if payload.len() < expected_len {
        return Err(Error::TruncatedPayload {
            expected: expected_len,
            actual: payload.len(),
        });
    }
    if payload.len() > expected_len {
        return Err(Error::TrailingBytes {
            expected: expected_len,
            actual: payload.len(),
        });
    }

    let mut tensors = BTreeMap::new();
    for (name, entry) in entries {
        let (r, c) = (entry.shape[0], entry.shape[1]);
        let raw = &payload[entry.offset..entry.offset + r * c * 4];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        tensors.insert(name, Matrix::from_vec(r, c, data)?);
    }
    WeightContainer::new(config, tensors)
}
