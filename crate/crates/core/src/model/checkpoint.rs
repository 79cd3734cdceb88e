//! Checkpoint files: one JSON header line, then little-endian f32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const FORMAT: &str = "mvcl-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dtype: String,
    config: ModelConfig,
    payload_bytes: usize,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

pub fn write_checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (name, t) in &model.params {
        let bytes = t.numel() * 4;
        tensors.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes,
        });
        offset += bytes;
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        dtype: "f32".into(),
        config: model.config.clone(),
        payload_bytes: offset,
        tensors,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(offset);
    for t in model.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint_bytes(bytes: &[u8]) -> Result<Model> {
    let corrupt = |msg: String| Error::Checkpoint(msg);
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..split]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(corrupt(format!("unknown format '{}'", header.format)));
    }
    if header.version != VERSION {
        return Err(corrupt(format!("unsupported version {}", header.version)));
    }
    if header.dtype != "f32" {
        return Err(corrupt(format!("unsupported dtype '{}'", header.dtype)));
    }
    let payload = &bytes[split + 1..];
    if payload.len() != header.payload_bytes {
        return Err(corrupt(format!(
            "payload is {} bytes, header declares {} (truncated or corrupted file)",
            payload.len(),
            header.payload_bytes
        )));
    }
    let mut params = ParamSet::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let end = e.offset.checked_add(e.bytes).filter(|&end| end <= payload.len());
        let end = match end {
            Some(end) if e.bytes == numel * 4 => end,
            _ => return Err(corrupt(format!("tensor {} has an inconsistent extent", e.name))),
        };
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| corrupt(format!("tensor {}: {err}", e.name)))?;
        params.insert(e.name, t);
    }
    Model::from_params(header.config, params)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint_bytes(&bytes)
}

/// Outcome of loading a checkpoint into a differently shaped model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Tensors copied from the checkpoint.
    pub loaded: Vec<String>,
    /// Tensors left at (or reset to) a fresh initialization.
    pub reinitialized: Vec<String>,
}

impl Model {
    /// Copies every checkpoint tensor whose name and shape match; the rest
    /// keep this model's own initialization.
    pub fn load_matching(&mut self, source: &Model) -> TransferReport {
        let mut report = TransferReport::default();
        for (name, t) in self.params.iter_mut() {
            match source.params.get(name) {
                Some(s) if s.shape() == t.shape() => {
                    *t = s.clone();
                    report.loaded.push(name.clone());
                }
                _ => report.reinitialized.push(name.clone()),
            }
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            length: 8,
            hidden: 8,
            layers: 1,
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = Model::new(small(), 5).unwrap();
        let back = read_checkpoint_bytes(&write_checkpoint_bytes(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = write_checkpoint_bytes(&Model::new(small(), 5).unwrap()).unwrap();
        let err = read_checkpoint_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":9", 1);
        assert!(read_checkpoint_bytes(text.as_bytes()).is_err());
        assert!(read_checkpoint_bytes(b"{}").is_err());
    }

    #[test]
    fn channel_change_reinitializes_input_projections_only() {
        let src = Model::new(small(), 1).unwrap();
        let mut dst = Model::new(ModelConfig { channels: 3, ..small() }, 2).unwrap();
        let report = dst.load_matching(&src);
        let mut expect = vec!["enc.t.in.w", "enc.d.in.w", "enc.f.in.w"];
        expect.sort();
        let mut got = report.reinitialized.clone();
        got.sort();
        assert_eq!(got, expect);
        assert_eq!(dst.param("enc.t.l0.attn.q.w"), src.param("enc.t.l0.attn.q.w"));
        assert_eq!(dst.param("enc.t.in.b"), src.param("enc.t.in.b"));
    }
}
