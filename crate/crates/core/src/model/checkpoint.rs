//! Binary checkpoint container.
//!
//! Layout (little-endian):
//! `b"SCGSCKPT"` · version `u32` · header length `u32` · header JSON
//! (`{"arch": ArchSpec, "meta": ClassifierMeta}`) · parameter count `u64` ·
//! parameters as `f64` · SHA-256 of everything before it (32 bytes).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchSpec, Classifier, ClassifierMeta};
use crate::error::{Error, Result};
use crate::fsio;

const MAGIC: &[u8; 8] = b"SCGSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    meta: ClassifierMeta,
}

pub fn encode_checkpoint(model: &Classifier) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        arch: model.arch().clone(),
        meta: model.meta.clone(),
    })?;
    let mut out = Vec::with_capacity(64 + header.len() + model.params().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    if bytes.len() < *pos + n {
        return Err(Error::Checkpoint(format!(
            "truncated checkpoint: need {} bytes at offset {}, have {}",
            n,
            *pos,
            bytes.len()
        )));
    }
    let s = &bytes[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Classifier> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let hlen = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, hlen)?)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let n = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(bytes, &mut pos, n.checked_mul(8).ok_or_else(|| {
        Error::Checkpoint("parameter count overflow".into())
    })?)?;
    let body_end = pos;
    let digest = take(bytes, &mut pos, 32)?;
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after checksum".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut model = Classifier::zeros(header.arch)
        .map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
    if model.params().len() != n {
        return Err(Error::Checkpoint(format!(
            "architecture needs {} parameters, file has {n}",
            model.params().len()
        )));
    }
    for (dst, chunk) in model.params_mut().iter_mut().zip(raw.chunks_exact(8)) {
        *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
    }
    model.meta = header.meta;
    Ok(model)
}

pub fn save_checkpoint(model: &Classifier, path: &Path) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Classifier> {
    decode_checkpoint(&fsio::read(path)?)
}

/// Loads a checkpoint and requires it to match `expected` exactly.
pub fn load_checkpoint_for(path: &Path, expected: &ArchSpec) -> Result<Classifier> {
    let model = load_checkpoint(path)?;
    if model.arch() != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture {:?} does not match expected {:?}",
            model.arch(),
            expected
        )));
    }
    Ok(model)
}
