//! Binary checkpoint format.
//!
//! ```text
//! "CTCA"  u16 version
//! u32 len, config as pretty JSON (field order fixed by the struct)
//! u32 count, then per parameter:
//!     u16 len, name, u8 rank, u64 dims..., f64 data...
//! u8 has_optimizer [u64 step, f64 beta1, beta2, eps, per parameter m..., v...]
//! u64 iteration, u64 rng_seed
//! ```
//! All integers and floats little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Recognizer, RecognizerConfig, RecognizerError};
use crate::numerics::{Adam, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"CTCA";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,

    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u16, expected: u16 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Model(#[from] RecognizerError),
}

/// A model plus the training state needed to resume it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Recognizer,
    pub optimizer: Option<Adam>,
    pub iteration: u64,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn new(model: Recognizer) -> Self {
        Checkpoint { model, optimizer: None, iteration: 0, rng_seed: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_string_pretty(self.model.config()).expect("config serializes");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());

        out.extend_from_slice(&(self.model.params().len() as u32).to_le_bytes());
        for (name, p) in self.model.param_names().iter().zip(self.model.params()) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.shape().len() as u8);
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_f64s(&mut out, p.data());
        }

        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                out.extend_from_slice(&adam.step_count.to_le_bytes());
                put_f64s(&mut out, &[adam.beta1, adam.beta2, adam.epsilon]);
                for st in &adam.states {
                    put_f64s(&mut out, &st.m);
                    put_f64s(&mut out, &st.v);
                }
            }
        }
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| CheckpointError::Corrupt("config is not UTF-8".into()))?;
        let config: RecognizerConfig =
            serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        config.validate()?;
        let specs = config.param_specs();

        let count = r.u32("parameter count")? as usize;
        if count != specs.len() {
            return Err(CheckpointError::Corrupt(format!("{count} parameters, config defines {}", specs.len())));
        }
        let mut names = Vec::with_capacity(count);
        let mut params = Vec::with_capacity(count);
        for spec in &specs {
            let n = r.u16("parameter name length")? as usize;
            let name = String::from_utf8(r.take(n, "parameter name")?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
            if name != spec.name {
                return Err(CheckpointError::Corrupt(format!("expected parameter {}, found {name}", spec.name)));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let shape = (0..rank).map(|_| r.u64("shape").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if shape != spec.shape {
                return Err(CheckpointError::Corrupt(format!("{name}: shape {shape:?}, expected {:?}", spec.shape)));
            }
            let data = r.f64s(shape.iter().product(), "parameter data")?;
            params.push(Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?);
            names.push(name);
        }

        let optimizer = match r.take(1, "optimizer flag")?[0] {
            0 => None,
            1 => {
                let step_count = r.u64("optimizer step")?;
                let h = r.f64s(3, "optimizer hyperparameters")?;
                let mut states = Vec::with_capacity(count);
                for p in &params {
                    let m = r.f64s(p.len(), "optimizer moments")?;
                    let v = r.f64s(p.len(), "optimizer moments")?;
                    states.push(AdamState { m, v });
                }
                Some(Adam { beta1: h[0], beta2: h[1], epsilon: h[2], step_count, states })
            }
            f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}"))),
        };
        let iteration = r.u64("iteration")?;
        let rng_seed = r.u64("rng seed")?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { model: Recognizer::from_parts(config, names, params), optimizer, iteration, rng_seed })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and requires the stored config to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &RecognizerConfig) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if ck.model.config() != expected {
            return Err(CheckpointError::ConfigMismatch(describe_mismatch(expected, ck.model.config())));
        }
        Ok(ck)
    }
}

fn describe_mismatch(expected: &RecognizerConfig, found: &RecognizerConfig) -> String {
    let e = serde_json::to_value(expected).expect("serializes");
    let f = serde_json::to_value(found).expect("serializes");
    let fields: Vec<&str> = e
        .as_object()
        .unwrap()
        .iter()
        .filter(|(k, v)| f.get(k.as_str()) != Some(v))
        .map(|(k, _)| k.as_str())
        .collect();
    format!("fields differ: {}", fields.join(", "))
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
