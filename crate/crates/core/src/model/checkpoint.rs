//! Single-file checkpoints.
//!
//! Layout (little-endian): magic `SAUNETCK`, `u32` version, `u32` manifest
//! length + JSON manifest, `u32` record count, then per record `u32` path
//! length + path, `u8` kind, `u8` ndim, `u32` dims, raw `f32` data. A
//! trailing CRC-32 covers every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::{ParamEntry, ParamKind, Parameters};
use super::unet::Model;
use crate::error::{Error, Result};
use crate::preprocessing::PipelineConfig;

const MAGIC: &[u8; 8] = b"SAUNETCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub tool_version: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: Model<f32>,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::Gamma => 2,
        ParamKind::Beta => 3,
        ParamKind::RunningMean => 4,
        ParamKind::RunningVar => 5,
    }
}

fn kind_from(code: u8) -> Result<ParamKind> {
    Ok(match code {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::Gamma,
        3 => ParamKind::Beta,
        4 => ParamKind::RunningMean,
        5 => ParamKind::RunningVar,
        other => return Err(Error::Checkpoint(format!("unknown parameter kind {other}"))),
    })
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit a u32 field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(model: &Model<f32>, pipeline: &PipelineConfig, step: usize) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        model: model.cfg.clone(),
        pipeline: *pipeline,
        step,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(64 + json.len() + 4 * model.params.entries().iter().map(|e| e.data.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.len())?;
    for e in model.params.entries() {
        put_u32(&mut out, e.path.len())?;
        out.extend_from_slice(e.path.as_bytes());
        out.push(kind_code(e.kind));
        out.push(e.shape.len() as u8);
        for &d in &e.shape {
            put_u32(&mut out, d)?;
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([trailer[0], trailer[1], trailer[2], trailer[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (file is corrupted)".into()));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let manifest: CheckpointManifest =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let count = r.u32()?;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()?;
        let path = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter path is not UTF-8".into()))?
            .to_string();
        let kind = kind_from(r.u8()?)?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::Checkpoint(format!("{path}: shape overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        entries.push(ParamEntry { path, shape, kind, data });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let model = Model::with_parameters(&manifest.model, Parameters::from_entries(entries))?;
    Ok(Checkpoint { manifest, model })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, pipeline: &PipelineConfig, step: usize) -> Result<()> {
    let bytes = encode_checkpoint(model, pipeline, step)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        let cfg = ModelConfig {
            base_channels: 2,
            levels: 2,
            gn_groups: 2,
            ..ModelConfig::default()
        };
        Model::build(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let bytes = encode_checkpoint(&m, &PipelineConfig::default(), 7).unwrap();
        let c = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c.manifest.step, 7);
        assert_eq!(c.model.cfg, m.cfg);
        assert_eq!(c.model.params, m.params);
    }

    #[test]
    fn flipped_byte_is_detected() {
        let m = tiny();
        let mut bytes = encode_checkpoint(&m, &PipelineConfig::default(), 0).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(b"garbage"), Err(Error::Checkpoint(_))));
    }
}
