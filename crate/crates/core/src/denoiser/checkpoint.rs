//! Checkpoint files.
//!
//! ```text
//! "TADIFF-CKPT-1\n" | u32 LE header length | JSON header | TGV f64 parameters
//!                   | [TGV f64 Adam first moment | TGV f64 Adam second moment]
//! ```
//!
//! The header carries the architecture, the parameter layout descriptor, the
//! training step and an opaque run-configuration blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, ModelConfig, ParamLayout};
use crate::data::tgv::{write_atomic, TgvArray, TgvData};
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8] = b"TADIFF-CKPT-1\n";

/// Adam moment estimates plus the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub updates: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            updates: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub step: u64,
    pub optimizer: Option<OptimizerState>,
    pub run_config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    layout: ParamLayout,
    step: u64,
    optimizer_updates: Option<u64>,
    run_config: serde_json::Value,
}

fn f64_array(v: &[f64]) -> Result<TgvArray> {
    TgvArray::f64(vec![v.len()], v.to_vec())
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        model: ckpt.model.config().clone(),
        layout: ckpt.model.layout().clone(),
        step: ckpt.step,
        optimizer_updates: ckpt.optimizer.as_ref().map(|o| o.updates),
        run_config: ckpt.run_config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&f64_array(ckpt.model.params())?.encode());
    if let Some(opt) = &ckpt.optimizer {
        out.extend_from_slice(&f64_array(&opt.m)?.encode());
        out.extend_from_slice(&f64_array(&opt.v)?.encode());
    }
    Ok(out)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

fn take_vec(bytes: &[u8], at: &mut usize, expect: usize) -> Result<Vec<f64>> {
    let (arr, used) = TgvArray::decode_prefix(&bytes[*at..], *at as u64)?;
    let start = *at;
    *at += used;
    match arr.data {
        TgvData::F64(v) if v.len() == expect && arr.dims.len() == 1 => Ok(v),
        _ => Err(Error::Format {
            offset: start as u64,
            reason: format!("expected a flat f64 array of {expect} values"),
        }),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let n = CKPT_MAGIC.len();
    if bytes.len() < n || &bytes[..n] != CKPT_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(n)])
            .trim_end()
            .to_string();
        let reason = if found.starts_with("TADIFF-CKPT-") {
            format!("unsupported checkpoint version `{found}` (expected TADIFF-CKPT-1)")
        } else {
            format!("bad checkpoint magic `{found}` (expected TADIFF-CKPT-1)")
        };
        return Err(Error::Format { offset: 0, reason });
    }
    if bytes.len() < n + 4 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: "truncated header length".into(),
        });
    }
    let hlen = u32::from_le_bytes(bytes[n..n + 4].try_into().unwrap()) as usize;
    let hstart = n + 4;
    if bytes.len() < hstart + hlen {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            reason: "truncated JSON header".into(),
        });
    }
    let header: Header =
        serde_json::from_slice(&bytes[hstart..hstart + hlen]).map_err(|e| Error::Format {
            offset: hstart as u64,
            reason: format!("invalid header: {e}"),
        })?;
    let mut at = hstart + hlen;
    let params = take_vec(bytes, &mut at, header.layout.total)?;
    let model = Denoiser::from_params(header.model, params)?;
    if model.layout() != &header.layout {
        return Err(Error::Format {
            offset: hstart as u64,
            reason: "layout descriptor does not match the architecture".into(),
        });
    }
    let optimizer = match header.optimizer_updates {
        Some(updates) => {
            let total = header.layout.total;
            let m = take_vec(bytes, &mut at, total)?;
            let v = take_vec(bytes, &mut at, total)?;
            Some(OptimizerState { updates, m, v })
        }
        None => None,
    };
    if at != bytes.len() {
        return Err(Error::Format {
            offset: at as u64,
            reason: "trailing bytes after checkpoint payload".into(),
        });
    }
    Ok(Checkpoint {
        model,
        step: header.step,
        optimizer,
        run_config: header.run_config,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
