//! Binary checkpoint: `"UMCK"`, a `u32` format version, a `u32` length and
//! a JSON header, then little-endian `f32` arrays: parameters in layout
//! order, batch-norm running means and variances per stem stage, and the
//! Adam step and moments when present.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::{EpochRecord, Regime, TrainError};
use crate::net::{ModelConfig, Network};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub regime: Regime,
    pub seed: u64,
    pub dataset_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: Option<AdamState>,
    pub history: Vec<EpochRecord>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    param_count: usize,
    has_optimizer: bool,
    history: Vec<EpochRecord>,
    provenance: Provenance,
}

fn put(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], TrainError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TrainError> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| TrainError::Checkpoint("array too large".into()))?)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.network.config.clone(),
            param_count: self.network.params.len(),
            has_optimizer: self.optimizer.is_some(),
            history: self.history.clone(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + json.len() + 12 * self.network.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        put(&mut out, &self.network.params);
        for (m, v) in &self.network.running {
            put(&mut out, m);
            put(&mut out, v);
        }
        if let Some(opt) = &self.optimizer {
            out.extend_from_slice(&opt.step.to_le_bytes());
            put(&mut out, &opt.m);
            put(&mut out, &opt.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic, not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(len)?).map_err(|e| TrainError::Checkpoint(format!("header: {e}")))?;
        let params = r.f32s(header.param_count)?;
        let mut running = Vec::new();
        for &c in &header.config.stem_channels {
            running.push((r.f32s(c)?, r.f32s(c)?));
        }
        let optimizer = if header.has_optimizer {
            let step = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            Some(AdamState { step, m: r.f32s(header.param_count)?, v: r.f32s(header.param_count)? })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let network =
            Network::from_parts(header.config, params, running).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if !network.is_finite() {
            return Err(TrainError::Checkpoint("non-finite parameters".into()));
        }
        Ok(Checkpoint { network, optimizer, history: header.history, provenance: header.provenance })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
