//! Versioned, checksummed checkpoint container.
//!
//! Layout (little endian): magic `MSCK`, format version `u32`, JSON metadata
//! (length-prefixed), then three length-prefixed parameter-store blobs
//! (weights, first moments, second moments), and a trailing CRC32 of all
//! preceding bytes. Parameters and optimizer state round-trip bit-exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::metamodel::ModelSpec;
use crate::nncore::{AdamWConfig, ParamStore};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub iteration: u64,
    pub global_seed: u64,
    pub adamw: AdamWConfig,
    pub adamw_step: u64,
    pub last_loss: f64,
    pub ema_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub opt_m: ParamStore,
    pub opt_v: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)
            .map_err(|e| TrainError::Config(format!("metadata serialization: {e}")))?;
        push_blob(&mut out, &meta);
        push_blob(&mut out, &self.params.to_bytes());
        push_blob(&mut out, &self.opt_m.to_bytes());
        push_blob(&mut out, &self.opt_v.to_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 12 {
            return Err(TrainError::Integrity("checkpoint too short".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(TrainError::Integrity("checksum mismatch".into()));
        }
        if body[..4] != CHECKPOINT_MAGIC {
            return Err(TrainError::Integrity("bad checkpoint magic".into()));
        }
        let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::UnsupportedVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut rest = &body[8..];
        let meta_blob = take_blob(&mut rest)?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_blob)
            .map_err(|e| TrainError::Integrity(format!("metadata: {e}")))?;
        let params = ParamStore::from_bytes(take_blob(&mut rest)?)?;
        let opt_m = ParamStore::from_bytes(take_blob(&mut rest)?)?;
        let opt_v = ParamStore::from_bytes(take_blob(&mut rest)?)?;
        if !rest.is_empty() {
            return Err(TrainError::Integrity("trailing bytes in checkpoint".into()));
        }
        Ok(Self {
            meta,
            params,
            opt_m,
            opt_v,
        })
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        let tmp = tmp_sibling(path);
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn push_blob(out: &mut Vec<u8>, blob: &[u8]) {
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob);
}

fn take_blob<'a>(rest: &mut &'a [u8]) -> Result<&'a [u8], TrainError> {
    if rest.len() < 8 {
        return Err(TrainError::Integrity("truncated checkpoint".into()));
    }
    let (len_bytes, tail) = rest.split_at(8);
    let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    if tail.len() < len {
        return Err(TrainError::Integrity("truncated checkpoint".into()));
    }
    let (blob, tail) = tail.split_at(len);
    *rest = tail;
    Ok(blob)
}
