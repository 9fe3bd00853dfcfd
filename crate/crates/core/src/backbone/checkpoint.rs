//! Checkpoint file format.
//!
//! ```text
//! "RFRCKPT1"                 8 magic bytes
//! u32 little-endian          header length in bytes
//! header                     UTF-8 JSON: config, iteration, meta, tensor manifest
//! payload                    f32 little-endian values, manifest order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, BackboneParams, ParamEntry};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RFRCKPT1";

/// Training-side facts needed to check that inference options fit the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointMeta {
    pub task: Option<String>,
    /// `standard` or `bridge`.
    pub path: Option<String>,
    pub cfg_dropout_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BackboneConfig,
    pub iteration: u64,
    pub meta: CheckpointMeta,
    pub params: BackboneParams<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: BackboneConfig,
    iteration: u64,
    meta: CheckpointMeta,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            meta: self.meta.clone(),
            tensors: self
                .params
                .entries()
                .iter()
                .map(|e| TensorRecord {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.params.count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in self.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut len = [0u8; 4];
        cursor
            .read_exact(&mut len)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let len = u32::from_le_bytes(len) as usize;
        if cursor.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let (json, payload) = cursor.split_at(len);
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(e.to_string()))?;

        let expected = BackboneParams::<f32>::from_values(
            &header.config,
            vec![0.0; super::parameter_count(&header.config)?],
        )?;
        let manifest: Vec<(String, Vec<usize>)> = header
            .tensors
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        let layout: Vec<(String, Vec<usize>)> = expected
            .entries()
            .iter()
            .map(|e: &ParamEntry| (e.name.clone(), e.shape.clone()))
            .collect();
        if manifest != layout {
            return Err(Error::Incompatible(
                "tensor manifest does not match the stored config".into(),
            ));
        }
        if let Some(t) = header.tensors.iter().find(|t| t.dtype != "f32") {
            return Err(Error::Format(format!(
                "unsupported dtype {} for {}",
                t.dtype, t.name
            )));
        }
        if payload.len() != 4 * expected.count() {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * expected.count()
            )));
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            params: BackboneParams::from_values(&header.config, values)?,
            config: header.config,
            iteration: header.iteration,
            meta: header.meta,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
