//! Versioned single-file model container.
//!
//! Models are JSON documents with a `format`/`version`/`kind` envelope.
//! Matrices and vectors are stored as `{ "rows", "cols", "data" }` where
//! `data` is base64 of the row-major little-endian IEEE-754 `f64` values.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "facesim-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    kind: String,
    model: T,
}

#[derive(Serialize, Deserialize)]
struct EncodedMatrix {
    rows: usize,
    cols: usize,
    data: String,
}

fn encode(rows: usize, cols: usize, row_major: impl Iterator<Item = f64>) -> EncodedMatrix {
    let bytes: Vec<u8> = row_major.flat_map(f64::to_le_bytes).collect();
    EncodedMatrix {
        rows,
        cols,
        data: STANDARD.encode(bytes),
    }
}

fn decode(enc: EncodedMatrix) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let bytes = STANDARD.decode(enc.data).map_err(|e| e.to_string())?;
    let expected = enc
        .rows
        .checked_mul(enc.cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or("matrix shape overflows")?;
    if bytes.len() != expected {
        return Err(format!(
            "{}x{} matrix needs {expected} bytes, found {}",
            enc.rows,
            enc.cols,
            bytes.len()
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((enc.rows, enc.cols, values))
}

/// `#[serde(with = "matrix")]` adapter for `DMatrix<f64>`.
pub mod matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (r, c) = m.shape();
        encode(r, c, (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)]))).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let (r, c, v) = decode(EncodedMatrix::deserialize(d)?).map_err(serde::de::Error::custom)?;
        Ok(DMatrix::from_row_slice(r, c, &v))
    }
}

/// `#[serde(with = "vector")]` adapter for `DVector<f64>`.
pub mod vector {
    use super::*;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        encode(v.len(), 1, v.iter().copied()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DVector<f64>, D::Error> {
        let (r, c, v) = decode(EncodedMatrix::deserialize(d)?).map_err(serde::de::Error::custom)?;
        if c != 1 {
            return Err(serde::de::Error::custom(format!("expected a column vector, got {r}x{c}")));
        }
        Ok(DVector::from_vec(v))
    }
}

/// Implemented by every persisted model; checked after decoding.
pub trait ModelFile: Serialize + DeserializeOwned {
    const KIND: &'static str;

    fn validate(&self) -> Result<()>;
}

pub fn to_json<M: ModelFile>(model: &M) -> String {
    serde_json::to_string(&Envelope {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        kind: M::KIND.to_string(),
        model,
    })
    .expect("model serializes")
}

pub fn from_json<M: ModelFile>(text: &str) -> Result<M> {
    let env: Envelope<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
    if env.format != MODEL_FORMAT {
        return Err(Error::ModelFormat(format!("not a model file (format `{}`)", env.format)));
    }
    if env.version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {}", env.version)));
    }
    if env.kind != M::KIND {
        return Err(Error::ModelFormat(format!(
            "expected a `{}` model, found `{}`",
            M::KIND,
            env.kind
        )));
    }
    let model: M = serde_json::from_value(env.model).map_err(|e| Error::ModelFormat(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn save<M: ModelFile>(model: &M, path: &Path) -> Result<()> {
    fs::write(path, to_json(model)).map_err(|e| Error::io(path, e))
}

pub fn load<M: ModelFile>(path: &Path) -> Result<M> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text)
}
