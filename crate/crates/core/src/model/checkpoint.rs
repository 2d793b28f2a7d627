use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::network::{InputNorm, Model};
use super::train::{EpochMetrics, RngState};
use crate::error::{IbitError, Result};
use crate::linalg::Matrix;
use crate::mask::SubMaskPair;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IBCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    variant: Variant,
    epoch: usize,
    rng: Option<RngState>,
    history: Vec<EpochMetrics>,
    input_norm: Option<InputNorm>,
    num_params: usize,
}

/// A model snapshot with its training context.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub history: Vec<EpochMetrics>,
}

impl ModelCheckpoint {
    pub fn capture(model: &Model, epoch: usize, history: &[EpochMetrics], rng: Option<RngState>) -> Self {
        Self {
            model: model.clone(),
            epoch,
            rng,
            history: history.to_vec(),
        }
    }

    /// `IBCK`, version (u32 LE), header JSON length (u32 LE), header JSON,
    /// then per parameter: name length (u32), name, rows (u32), cols (u32),
    /// little-endian f64 values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config().clone(),
            variant: self.model.variant(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            history: self.history.clone(),
            input_norm: self.model.input_norm(),
            num_params: self.model.params().len(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| IbitError::State(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(json.len())?.to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.model.params() {
            out.extend_from_slice(&u32_len(p.name.len())?.to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&u32_len(p.value.rows())?.to_le_bytes());
            out.extend_from_slice(&u32_len(p.value.cols())?.to_le_bytes());
            for v in p.value.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(format_err(0, "bad checkpoint magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(4, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let start = r.pos;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| format_err(start, format!("bad header: {e}")))?;
        header.config.validate()?;

        let mut values = HashMap::with_capacity(header.num_params);
        for _ in 0..header.num_params {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| format_err(at + 4, "parameter name is not UTF-8"))?
                .to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data_at = r.pos;
            let raw = r.take(rows * cols * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::new(rows, cols, data).map_err(|e| format_err(data_at, e.to_string()))?;
            if values.insert(name.clone(), m).is_some() {
                return Err(format_err(at, format!("duplicate parameter {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err(r.pos, "trailing bytes after parameters"));
        }

        let cfg = &header.config;
        let placeholder = match header.variant {
            Variant::Ibit => Some(SubMaskPair::ones(cfg.effective_mask_fidelity(), cfg.num_patches())?),
            Variant::Baseline => None,
        };
        let mut model = Model::with_mask(cfg, header.variant, placeholder)?;
        if model.params().len() != header.num_params {
            return Err(IbitError::State(format!(
                "checkpoint has {} parameters, configuration implies {}",
                header.num_params,
                model.params().len()
            )));
        }
        model.load_values(values)?;
        model.set_input_norm(header.input_norm);
        Ok(Self {
            model,
            epoch: header.epoch,
            rng: header.rng,
            history: header.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| IbitError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| IbitError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| IbitError::State(format!("length {n} exceeds u32")))
}

fn format_err(offset: usize, reason: impl Into<String>) -> IbitError {
    IbitError::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format_err(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
