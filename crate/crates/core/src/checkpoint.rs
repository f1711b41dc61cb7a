//! Versioned binary checkpoints.
//!
//! Layout (little endian): 8-byte magic, `u32` version, `u64` length and
//! JSON body holding the model config, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, `u32` rows, `u32` cols and the `f64`
//! values.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ModelConfig;
use crate::model::{ModelError, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BLNETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
}

pub fn to_bytes(params: &ModelParams, header: &CheckpointHeader) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(header).expect("header serializes");
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (_, name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::Format("truncated".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, CheckpointHeader), CheckpointError> {
    let mut c = Cursor(bytes);
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    if c.take(8).map_err(|_| fmt("missing magic"))? != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = c.u64()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(c.take(len)?).map_err(|e| fmt(&format!("bad header: {e}")))?;
    let mut params = ModelParams::init(header.model.clone(), 0)?;
    let count = c.u32()? as usize;
    if count != params.store.len() {
        return Err(fmt(&format!(
            "{count} tensors stored but the config needs {}",
            params.store.len()
        )));
    }
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(n)?).map_err(|_| fmt("tensor name is not UTF-8"))?;
        let id = params
            .store
            .id(name)
            .ok_or_else(|| fmt(&format!("unexpected tensor {name}")))?;
        let rows = c.u32()? as usize;
        let cols = c.u32()? as usize;
        let target = params.store.get(id);
        if (rows, cols) != (target.rows(), target.cols()) {
            return Err(fmt(&format!("tensor {name} has shape {rows}x{cols}")));
        }
        let raw = c.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        *params.store.get_mut(id) = Tensor::from_vec(rows, cols, data);
    }
    if !c.0.is_empty() {
        return Err(fmt("trailing bytes"));
    }
    Ok((params, header))
}

pub fn save(params: &ModelParams, header: &CheckpointHeader, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params, header)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelParams, CheckpointHeader), CheckpointError> {
    let path = path.as_ref();
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    from_bytes(&bytes)
}
