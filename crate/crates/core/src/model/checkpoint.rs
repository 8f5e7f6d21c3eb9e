//! Binary checkpoint format.
//!
//! ```text
//! "SEPP" | u16 version | u64 body length
//! body:  u32 len + graph JSON | u32 len + metadata JSON | u32 array count
//!        per array: u16 name len, name, u8 rank, u32 dims…, f32 LE values
//! u32 CRC32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{GraphDescription, ModelGraph};
use crate::autodiff::Tensor;
use crate::error::{CheckpointError, Result};
use crate::pruner::PruneBlueprint;

pub const MAGIC: [u8; 4] = *b"SEPP";
pub const VERSION: u16 = 1;
const HEADER: usize = 4 + 2 + 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: Option<usize>,
    pub best_val_sisdri: Option<f64>,
    pub config_hash: Option<String>,
    /// Present on pruned models.
    pub blueprint: Option<PruneBlueprint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelGraph,
    pub meta: CheckpointMeta,
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let graph = serde_json::to_vec(&ckpt.model.desc).map_err(|e| malformed(e.to_string()))?;
    let meta = serde_json::to_vec(&ckpt.meta).map_err(|e| malformed(e.to_string()))?;
    let mut body = Vec::new();
    for blob in [&graph, &meta] {
        body.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        body.extend_from_slice(blob);
    }
    body.extend_from_slice(&(ckpt.model.params.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.model.params {
        let n = name.as_bytes();
        if n.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(malformed(format!("array `{name}` cannot be encoded")).into());
        }
        body.extend_from_slice(&(n.len() as u16).to_le_bytes());
        body.extend_from_slice(n);
        body.push(t.shape().len() as u8);
        for &d in t.shape() {
            body.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(HEADER + body.len() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| malformed("field runs past the end of the body"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated("header incomplete".into()).into());
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        }
        .into());
    }
    let body_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
    let expected = (HEADER as u64).saturating_add(body_len).saturating_add(4);
    if (bytes.len() as u64) < expected {
        return Err(CheckpointError::Truncated(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        ))
        .into());
    }
    if (bytes.len() as u64) > expected {
        return Err(malformed("trailing bytes after checksum").into());
    }
    let split = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[split..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..split]);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed }.into());
    }

    let mut r = Reader {
        buf: &bytes[HEADER..split],
        pos: 0,
    };
    let n = r.u32()? as usize;
    let desc: GraphDescription =
        serde_json::from_slice(r.take(n)?).map_err(|e| malformed(format!("graph: {e}")))?;
    let n = r.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(n)?).map_err(|e| malformed(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| malformed("array name not utf-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| malformed("array too large"))?;
        let data: Vec<f32> = r
            .take(bytes_needed)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if params.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(malformed(format!("duplicate array `{name}`")).into());
        }
    }
    if r.pos != r.buf.len() {
        return Err(malformed("unread bytes in body").into());
    }
    let model = ModelGraph::new(desc, params).map_err(|e| malformed(e.to_string()))?;
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path)?)
}
