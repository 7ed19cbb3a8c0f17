//! NTCK checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NTCK" | version: u32 | header_len: u64 | header (JSON, header_len bytes) | tensor data
//! ```
//!
//! The header carries the model config, checkpoint kind, vocabulary, the
//! conversion report for spiking checkpoints, and a table of
//! `{name, shape, offset}` entries. Tensor data follows as packed `f32`
//! values in table order; `offset` is the byte offset into the data section.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TransformerConfig;
use crate::conversion::ConversionReport;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"NTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Analog,
    Spiking,
}

impl CheckpointKind {
    pub fn name(&self) -> &'static str {
        match self {
            CheckpointKind::Analog => "analog",
            CheckpointKind::Spiking => "spiking",
        }
    }
}

/// Dense row-major `f32` tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }
}

/// Bitwise equality, so NaN payloads and signed zeros compare exactly.
impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TransformerConfig,
    pub kind: CheckpointKind,
    /// Ordered character table of the corpus the model was trained on.
    pub vocab: Option<String>,
    pub tensors: BTreeMap<String, Tensor>,
    /// Present on spiking checkpoints.
    pub report: Option<ConversionReport>,
    /// File name of the report written next to the checkpoint, if any.
    pub report_ref: Option<String>,
}

impl ModelCheckpoint {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn require_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::WrongKind {
                expected: kind.name(),
                found: self.kind.name(),
            })
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (name, t) in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Format(format!("tensor `{name}` has inconsistent shape")));
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("tensor `{name}` holds non-finite values")));
            }
        }
        if self.kind == CheckpointKind::Spiking && self.report.is_none() {
            return Err(Error::Format("spiking checkpoint lacks its conversion report".into()));
        }
        Ok(())
    }

    /// SHA-256 over the names, shapes, and raw bits of the selected tensors.
    pub fn digest(&self, mut include: impl FnMut(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            if !include(name) {
                continue;
            }
            h.update(name.as_bytes());
            for d in &t.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for x in &t.data {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += 4 * t.data.len() as u64;
        }
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            report_ref: self.report_ref.clone(),
            report: self.report.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Format("file shorter than the fixed preamble".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic; not an NTCK checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4-byte slice"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
        let header_end = 16u64
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("truncated header".into()))? as usize;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Format(format!("unreadable header: {e}")))?;
        let data = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.offset != expected_offset {
                return Err(Error::Format(format!("tensor `{}` is not packed in header order", e.name)));
            }
            let n = e.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let n = n.ok_or_else(|| Error::Format(format!("tensor `{}` shape overflows", e.name)))?;
            let start = e.offset as usize;
            let end = start
                .checked_add(n * 4)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::Format(format!("truncated data for tensor `{}`", e.name)))?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            expected_offset = end as u64;
            if tensors.insert(e.name.clone(), Tensor { shape: e.shape, data: values }).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        if expected_offset as usize != data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after tensor data",
                data.len() - expected_offset as usize
            )));
        }
        Ok(Self {
            config: header.config,
            kind: header.kind,
            vocab: header.vocab,
            tensors,
            report: header.report,
            report_ref: header.report_ref,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: CheckpointKind,
    config: TransformerConfig,
    vocab: Option<String>,
    report_ref: Option<String>,
    report: Option<ConversionReport>,
    tensors: Vec<TensorEntry>,
}

pub fn save(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AnnParams, TransformerConfig};

    fn tiny() -> ModelCheckpoint {
        let cfg = TransformerConfig::new(1, 2, 8, 4, 5);
        AnnParams::init(&cfg, 3).to_checkpoint(&cfg, Some("abcde".into()))
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ntck");
        let mut ck = tiny();
        ck.tensors.get_mut("tok_emb").unwrap().data[0] = -0.0;
        save(&ck, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
        assert_eq!(back.tensors["tok_emb"].data[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn preamble_is_bit_exact() {
        let bytes = tiny().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NTCK");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["kind"], "analog");
        let first = &header["tensors"][0];
        let name = first["name"].as_str().unwrap();
        let v = f32::from_le_bytes(bytes[16 + hl..16 + hl + 4].try_into().unwrap());
        assert_eq!(v.to_bits(), tiny().tensors[name].data[0].to_bits());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = tiny().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(ModelCheckpoint::from_bytes(&bytes[..10]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[20] = b'#';
        assert!(matches!(ModelCheckpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(ModelCheckpoint::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn kind_survives_roundtrip() {
        let mut ck = tiny();
        ck.kind = CheckpointKind::Spiking;
        let back = ModelCheckpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, CheckpointKind::Spiking);
        assert!(back.require_kind(CheckpointKind::Analog).is_err());
    }
}
