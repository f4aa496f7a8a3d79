//! Versioned, bit-exact model checkpoints.
//!
//! File layout: an 8-byte magic (`SPTLABCK`), a little-endian `u32` format
//! version, a little-endian `u64` manifest byte length, the manifest (JSON:
//! format version, model config, block names with shapes in canonical order,
//! provenance), then the payload — every parameter block's `f64`s
//! concatenated little-endian in manifest order. Lengths and shapes are the
//! only integrity checks; there is no checksum. Round trips are
//! bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numeric::Matrix;

pub const CKPT_MAGIC: [u8; 8] = *b"SPTLABCK";
pub const CKPT_VERSION: u32 = 1;

/// Fixed-size part of the header before the manifest bytes.
const HEADER_LEN: usize = 8 + 4 + 8;

/// Where the parameters came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Training stage that produced the params: "init", "spt", "finetune",
    /// or "scratch".
    pub stage: String,
    pub seed: u64,
    pub epochs: usize,
    /// Content hash of the dataset trained on ("" for a bare init).
    pub dataset_hash: String,
}

impl Provenance {
    pub fn init(seed: u64) -> Self {
        Provenance {
            stage: "init".into(),
            seed,
            epochs: 0,
            dataset_hash: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    /// Block names with shapes, in canonical (sorted) order; this is also
    /// the payload order.
    pub blocks: Vec<BlockEntry>,
    pub provenance: Provenance,
}

impl CheckpointManifest {
    pub fn payload_len_bytes(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols * 8).sum()
    }
}

/// Serialize `params` with metadata to `path`.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    provenance: &Provenance,
    path: &Path,
) -> Result<()> {
    let mut blocks = Vec::new();
    let mut payload = Vec::with_capacity(params.numel() * 8);
    for (name, m) in params.iter() {
        blocks.push(BlockEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
        });
        for v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CKPT_VERSION,
        config: config.clone(),
        blocks,
        provenance: provenance.clone(),
    };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(HEADER_LEN + manifest_json.len() + payload.len());
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&payload);
    fs::write(path, out)?;
    Ok(())
}

/// Load a checkpoint, validating magic, version, and payload length.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointManifest)> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Checkpoint(format!(
            "file too short for header: {} bytes, need at least {}",
            bytes.len(),
            HEADER_LEN
        )));
    }
    if bytes[..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            &bytes[..8],
            CKPT_MAGIC
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} unsupported (this build reads version {})",
            version, CKPT_VERSION
        )));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = HEADER_LEN + manifest_len;
    if bytes.len() < payload_start {
        return Err(Error::Checkpoint(format!(
            "manifest truncated: header promises {} bytes, file holds {}",
            manifest_len,
            bytes.len() - HEADER_LEN
        )));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])?;

    let expected = manifest.payload_len_bytes();
    let actual = bytes.len() - payload_start;
    if actual != expected {
        return Err(Error::Checkpoint(format!(
            "payload truncated or padded: expected {} bytes, got {}",
            expected, actual
        )));
    }

    let mut blocks = std::collections::BTreeMap::new();
    let mut off = payload_start;
    for entry in &manifest.blocks {
        let n = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        blocks.insert(entry.name.clone(), Matrix::from_vec(entry.rows, entry.cols, data)?);
    }
    let params = ModelParams::from_blocks(&manifest.config, blocks)?;
    Ok((params, manifest))
}
