//! Named-matrix container backed by a safetensors-style binary file.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian buffer. Offsets are
//! relative to the start of the buffer.
//!
//! Everything is widened to `f64` on load. Tensors of rank 1 load as a single
//! row; higher ranks fold their leading axes into rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use crate::matrix::{Matrix, MatrixError};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error)]
pub enum TensorStoreError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensor `{name}`: {reason}")]
    ShapeMismatch { name: String, reason: String },
    #[error("tensor `{name}`: unsupported dtype `{dtype}` (only F32 and F64 are supported)")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("no tensor named `{0}`")]
    NameNotFound(String),
    #[error("tensor `{0}` already present")]
    DuplicateName(String),
    #[error("tensor `{name}` holds a non-finite value at ({row}, {col})")]
    InvalidValue { name: String, row: usize, col: usize },
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Immutable-after-load collection of named matrices plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    entries: BTreeMap<String, Matrix>,
    metadata: BTreeMap<String, String>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, m: Matrix) -> Result<(), TensorStoreError> {
        let name = name.into();
        if name == METADATA_KEY {
            return Err(TensorStoreError::MalformedHeader(format!(
                "`{METADATA_KEY}` is reserved"
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(TensorStoreError::DuplicateName(name));
        }
        self.entries.insert(name, m);
        Ok(())
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn get_matrix(&self, name: &str) -> Result<&Matrix, TensorStoreError> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorStoreError::NameNotFound(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names matching `pattern`, where `pattern` contains exactly one `{}`
    /// standing for a non-negative decimal integer. Returned sorted by that
    /// integer.
    pub fn indexed_names(&self, pattern: &str) -> Vec<(usize, String)> {
        let Some((prefix, suffix)) = pattern.split_once("{}") else {
            return Vec::new();
        };
        let mut out: Vec<(usize, String)> = self
            .entries
            .keys()
            .filter_map(|name| {
                let mid = name.strip_prefix(prefix)?.strip_suffix(suffix)?;
                if mid.is_empty() || !mid.bytes().all(|b| b.is_ascii_digit()) {
                    return None;
                }
                Some((mid.parse().ok()?, name.clone()))
            })
            .collect();
        out.sort();
        out
    }
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<TensorStore, TensorStoreError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorStoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

/// Writes `store` as `F64`.
pub fn save_tensor_file(store: &TensorStore, path: impl AsRef<Path>) -> Result<(), TensorStoreError> {
    save_tensor_file_as(store, path, Dtype::F64)
}

pub fn save_tensor_file_as(
    store: &TensorStore,
    path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<(), TensorStoreError> {
    let path = path.as_ref();
    let bytes = encode(store, dtype)?;
    fs::write(path, bytes).map_err(|source| TensorStoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Serializes a store to the container format.
pub fn encode(store: &TensorStore, dtype: Dtype) -> Result<Vec<u8>, TensorStoreError> {
    for (name, m) in &store.entries {
        let bad = m.data().iter().position(|v| {
            !v.is_finite() || (dtype == Dtype::F32 && !(*v as f32).is_finite())
        });
        if let Some(i) = bad {
            return Err(TensorStoreError::InvalidValue {
                name: name.clone(),
                row: i / m.cols(),
                col: i % m.cols(),
            });
        }
    }

    let mut header = Map::new();
    let mut offset = 0usize;
    for (name, m) in &store.entries {
        let len = m.data().len() * dtype.size();
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": dtype.tag(),
                "shape": [m.rows(), m.cols()],
                "data_offsets": [offset, offset + len],
            }),
        );
        offset += len;
    }
    if !store.metadata.is_empty() {
        let meta: Map<String, Value> = store
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let header_text =
        serde_json::to_string(&Value::Object(header)).expect("JSON map serialization is infallible");

    let mut out = Vec::with_capacity(8 + header_text.len() + offset);
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    for m in store.entries.values() {
        match dtype {
            Dtype::F64 => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F32 => m
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    Ok(out)
}

/// Parses the container format from memory.
pub fn decode(bytes: &[u8]) -> Result<TensorStore, TensorStoreError> {
    let malformed = |msg: String| TensorStoreError::MalformedHeader(msg);
    if bytes.len() < 8 {
        return Err(malformed(format!(
            "file is {} bytes, shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(malformed(format!(
            "header length {header_len} exceeds the {available} bytes after the prefix"
        )));
    }
    let header_end = 8 + header_len as usize;
    let header_text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| malformed(format!("header is not UTF-8: {e}")))?;
    let header: Value = serde_json::from_str(header_text.trim_end())
        .map_err(|e| malformed(format!("header is not valid JSON: {e}")))?;
    let Value::Object(header) = header else {
        return Err(malformed("header must be a JSON object".into()));
    };
    let buffer = &bytes[header_end..];

    let mut store = TensorStore::new();
    for (name, entry) in header {
        if name == METADATA_KEY {
            let Value::Object(meta) = entry else {
                return Err(malformed("`__metadata__` must be an object".into()));
            };
            for (k, v) in meta {
                let Value::String(s) = v else {
                    return Err(malformed(format!("metadata value for `{k}` is not a string")));
                };
                store.metadata.insert(k, s);
            }
            continue;
        }
        let m = decode_entry(&name, &entry, buffer)?;
        store.entries.insert(name, m);
    }
    Ok(store)
}

fn decode_entry(name: &str, entry: &Value, buffer: &[u8]) -> Result<Matrix, TensorStoreError> {
    let malformed = |what: &str| TensorStoreError::MalformedHeader(format!("tensor `{name}`: {what}"));
    let shape_err = |reason: String| TensorStoreError::ShapeMismatch {
        name: name.to_string(),
        reason,
    };

    let obj = entry.as_object().ok_or_else(|| malformed("entry is not an object"))?;
    let tag = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string `dtype`"))?;
    let dtype = Dtype::parse(tag).ok_or_else(|| TensorStoreError::UnsupportedDtype {
        name: name.to_string(),
        dtype: tag.to_string(),
    })?;
    let shape: Vec<usize> = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array `shape`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| malformed("shape entries must be non-negative integers"))?;
    let offsets: Vec<usize> = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing array `data_offsets`"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| malformed("data_offsets must be non-negative integers"))?;
    let [begin, end] = offsets[..] else {
        return Err(malformed("data_offsets must have two entries"));
    };

    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| shape_err(format!("shape {shape:?} overflows")))?;
    if begin > end || end > buffer.len() {
        return Err(shape_err(format!(
            "byte range [{begin}, {end}) outside the {}-byte buffer",
            buffer.len()
        )));
    }
    let expected = numel
        .checked_mul(dtype.size())
        .ok_or_else(|| shape_err(format!("shape {shape:?} overflows")))?;
    if end - begin != expected {
        return Err(shape_err(format!(
            "shape {shape:?} as {} needs {expected} bytes, byte range holds {}",
            dtype.tag(),
            end - begin
        )));
    }

    let raw = &buffer[begin..end];
    let data: Vec<f64> = match dtype {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    let (rows, cols) = match shape.as_slice() {
        [] => (1, 1),
        [n] => (1, *n),
        [lead @ .., last] => (lead.iter().product(), *last),
    };
    Matrix::new(rows, cols, data).map_err(|e| match e {
        MatrixError::NonFinite { row, col } => TensorStoreError::InvalidValue {
            name: name.to_string(),
            row,
            col,
        },
        other => shape_err(other.to_string()),
    })
}
