// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary container for named `f64` tensors plus JSON metadata, used for
//! model weights and second-moment matrices.
//!
//! Layout: the magic `RLABTNSR`, a little-endian `u32` version, a `u64`
//! header length, the JSON header, then every tensor's values as
//! little-endian `f64` in header order.

use romelab_core::keyspace::SecondMoment;
use romelab_core::linalg::Matrix;
use romelab_core::model::{ModelConfig, TinyLm};
use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

const MAGIC: &[u8; 8] = b"RLABTNSR";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Metadata {
    Model { config: ModelConfig },
    SecondMoment { sample_count: usize, ridge: f64, layer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    metadata: Metadata,
    tensors: Vec<TensorEntry>,
}

fn encode(metadata: Metadata, tensors: &[(String, Vec<usize>, &[f64])]) -> Result<Vec<u8>> {
    let header = Header {
        metadata,
        tensors: tensors.iter().map(|(n, s, _)| TensorEntry { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LabError::Format(e.to_string()))?;
    let payload: usize = tensors.iter().map(|(_, _, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(20 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in tensors {
        for x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

type Decoded = (Metadata, Vec<(TensorEntry, Vec<f64>)>);

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let bad = |m: &str| LabError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a tensor container"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(LabError::Format(format!("unsupported container version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| LabError::Format(format!("header: {e}")))?;
    let mut data = body[header_len..].chunks_exact(8);
    if !data.remainder().is_empty() {
        return Err(bad("payload is not a whole number of f64 values"));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let values: Vec<f64> =
            data.by_ref().take(n).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if values.len() != n {
            return Err(LabError::Format(format!("tensor {} is truncated", entry.name)));
        }
        tensors.push((entry, values));
    }
    if data.next().is_some() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok((header.metadata, tensors))
}

pub fn encode_model(model: &TinyLm) -> Result<Vec<u8>> {
    encode(Metadata::Model { config: model.config().clone() }, &model.named_tensors())
}

pub fn decode_model(bytes: &[u8]) -> Result<TinyLm> {
    let (meta, tensors) = decode(bytes)?;
    let Metadata::Model { config } = meta else {
        return Err(LabError::Format("container holds a second moment, not a model".into()));
    };
    Ok(TinyLm::from_tensors(config, |name, shape| {
        tensors.iter().find(|(e, _)| e.name == name && e.shape == shape).map(|(_, v)| v.as_slice())
    })?)
}

pub fn encode_second_moment(c: &SecondMoment) -> Result<Vec<u8>> {
    let n = c.dim();
    encode(
        Metadata::SecondMoment { sample_count: c.sample_count, ridge: c.ridge, layer: c.layer },
        &[("C".to_string(), vec![n, n], c.matrix().as_slice())],
    )
}

pub fn decode_second_moment(bytes: &[u8]) -> Result<SecondMoment> {
    let (meta, mut tensors) = decode(bytes)?;
    let Metadata::SecondMoment { sample_count, ridge, layer } = meta else {
        return Err(LabError::Format("container holds a model, not a second moment".into()));
    };
    let (entry, values) =
        tensors.pop().filter(|_| tensors.is_empty()).ok_or(LabError::Format("expected one tensor".into()))?;
    if entry.shape.len() != 2 || entry.shape[0] != entry.shape[1] {
        return Err(LabError::Format("second moment must be square".into()));
    }
    let m = Matrix::new(entry.shape[0], entry.shape[1], values)?;
    Ok(SecondMoment::new(m, sample_count, ridge, layer)?)
}
