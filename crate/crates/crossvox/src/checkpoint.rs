//! Versioned checkpoint container.
//!
//! Layout: 4-byte magic, u32 format version, u64 metadata length, JSON
//! metadata, then every tensor's values as little-endian f64 in metadata
//! order. Values round-trip bit-exactly; the JSON carries the model kind,
//! configs, id maps, stage lineage and seeds needed to resume or evaluate.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::spkembed::XVectorConfig;
use crate::tts::ModelConfig;

const MAGIC: &[u8; 4] = b"CVCK";
const FORMAT_VERSION: u32 = 1;

/// Which network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tts,
    Xvec,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Tts => write!(f, "tts"),
            ModelKind::Xvec => write!(f, "xvec"),
        }
    }
}

/// Shape entry for one named tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Everything about a checkpoint except the raw values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub crate_version: String,
    /// Seed the run that produced this checkpoint was started with.
    pub seed: u64,
    /// Names of the training stages applied so far, in order.
    pub stages: Vec<String>,
    /// True once the model met its stage convergence criterion.
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tts_config: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub xvec_config: Option<XVectorConfig>,
    /// Corpus speaker id of each speaker-table / classifier row, in order.
    pub speaker_ids: Vec<u32>,
    /// Corpus language id of each language-table row, in order.
    pub language_ids: Vec<u32>,
    /// Filled by [`save`]; order matches the data section.
    #[serde(default)]
    pub tensors: Vec<TensorMeta>,
}

/// A loaded checkpoint: metadata plus a parameter store rebuilt in the
/// original registration order.
#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    /// Fails unless the checkpoint holds the expected model kind.
    pub fn ensure_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )));
        }
        Ok(())
    }
}

/// Writes `store` under `meta` to `path`. The tensor list in `meta` is
/// replaced by the store's contents.
pub fn save(path: &Path, mut meta: CheckpointMeta, store: &ParamStore) -> Result<()> {
    meta.tensors = store
        .iter()
        .map(|(_, name, v)| TensorMeta {
            name: name.to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
        })
        .collect();
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| Error::Checkpoint(format!("cannot serialize metadata: {e}")))?;

    let data_len: usize = store.iter().map(|(_, _, v)| v.len() * 8).sum();
    let mut bytes = Vec::with_capacity(16 + meta_json.len() + data_len);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    for (_, _, v) in store.iter() {
        for x in v.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint back, verifying magic, version and tensor sizes.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + meta_len;
    if bytes.len() < data_start {
        return Err(Error::Checkpoint("checkpoint truncated in metadata".into()));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))?;

    let expected: usize = meta.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if bytes.len() != data_start + expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint data section has {} bytes, metadata promises {expected}",
            bytes.len() - data_start
        )));
    }

    let mut store = ParamStore::new();
    let mut offset = data_start;
    for t in &meta.tensors {
        let n = t.rows * t.cols;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let start = offset + i * 8;
            values.push(f64::from_le_bytes(
                bytes[start..start + 8].try_into().expect("8 bytes"),
            ));
        }
        offset += n * 8;
        let arr = Array2::from_shape_vec((t.rows, t.cols), values)
            .expect("shape matches element count");
        store.add(t.name.clone(), arr);
    }
    Ok(Checkpoint { meta, store })
}
