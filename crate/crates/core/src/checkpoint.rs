//! Binary checkpoint container.
//!
//! ```text
//! "PCNN"  u32 version  u32 header_len  header (JSON)  u32 tensor_count
//! per tensor: u32 name_len  name  u32 rank  rank x u32 dims  f32 data
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use pcn_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::artifact::FORMAT_VERSION;
use crate::config::ModelConfig;
use crate::data::NormalizationSpec;
use crate::error::{Error, IoContext, Result};
use crate::model::PcModel;

pub const MAGIC: &[u8; 4] = b"PCNN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub model: ModelConfig,
    pub normalization: NormalizationSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: PcModel<f32>,
}

impl Checkpoint {
    pub fn new(model: PcModel<f32>, normalization: NormalizationSpec, seed: u64, epoch: usize) -> Self {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            config_hash: model.config.hash(),
            seed,
            epoch,
            model: model.config.clone(),
            normalization,
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, len_u32(header.len())?);
        out.extend_from_slice(&header);
        put_u32(&mut out, len_u32(self.model.params.len())?);
        for (name, p) in self.model.params.iter() {
            put_u32(&mut out, len_u32(name.len())?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, len_u32(p.tensor.rank())?);
            for &d in p.tensor.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.model.hash() != header.config_hash {
            return Err(Error::Format("header config hash does not match its model config".into()));
        }
        header.model.validate().map_err(|e| Error::Format(format!("header model: {e}")))?;
        header.normalization.validate().map_err(|e| Error::Format(format!("header normalization: {e}")))?;
        let mut model = PcModel::<f32>::new(header.model.clone(), 0)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(Error::Format(format!("{count} tensors, model has {}", model.params.len())));
        }
        let mut seen = std::collections::HashSet::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 4 {
                return Err(Error::Format(format!("tensor {name} has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let expected = model
                .params
                .get(&name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name}")))?;
            if expected.tensor.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {shape:?}, expected {:?}",
                    expected.tensor.shape()
                )));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            model.params.set(&name, Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit the checkpoint's u32 fields")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
