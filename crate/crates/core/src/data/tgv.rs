//! TGV: a minimal little-endian n-dimensional array container.
//!
//! ```text
//! "TGV1" | dtype: u8 | ndim: u8 | ndim x u32 LE dims | row-major LE payload
//! ```
//!
//! dtype 1 = f32, 2 = u8, 3 = f64.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TGV1";

#[derive(Debug, Clone, PartialEq)]
pub enum TgvData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl TgvData {
    fn dtype(&self) -> u8 {
        match self {
            TgvData::F32(_) => 1,
            TgvData::U8(_) => 2,
            TgvData::F64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TgvData::F32(v) => v.len(),
            TgvData::U8(v) => v.len(),
            TgvData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn elem_size(dtype: u8) -> Option<usize> {
    match dtype {
        1 => Some(4),
        2 => Some(1),
        3 => Some(8),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TgvArray {
    pub dims: Vec<usize>,
    pub data: TgvData,
}

impl TgvArray {
    pub fn new(dims: Vec<usize>, data: TgvData) -> Result<Self> {
        if dims.is_empty() || dims.len() > u8::MAX as usize {
            return Err(Error::Argument(format!("unsupported rank {}", dims.len())));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Argument("dimension exceeds u32".into()));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Argument(format!(
                "dims {dims:?} imply {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, TgvData::F32(values))
    }

    pub fn u8(dims: Vec<usize>, values: Vec<u8>) -> Result<Self> {
        Self::new(dims, TgvData::U8(values))
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, TgvData::F64(values))
    }

    /// Values widened to f64 regardless of storage dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TgvData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TgvData::U8(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TgvData::F64(v) => v.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let n = self.data.len();
        let mut out =
            Vec::with_capacity(6 + 4 * self.dims.len() + n * elem_size(self.data.dtype()).unwrap());
        out.extend_from_slice(MAGIC);
        out.push(self.data.dtype());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match &self.data {
            TgvData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TgvData::U8(v) => out.extend_from_slice(v),
            TgvData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes one array from the front of `bytes`, returning it with the
    /// number of bytes consumed. `base` offsets reported byte positions.
    pub fn decode_prefix(bytes: &[u8], base: u64) -> Result<(Self, usize)> {
        let err = |at: usize, reason: String| Error::Format {
            offset: base + at as u64,
            reason,
        };
        if bytes.len() < 6 {
            return Err(err(bytes.len(), "truncated header".into()));
        }
        if &bytes[..3] != b"TGV" {
            return Err(err(0, "bad magic".into()));
        }
        if bytes[3] != b'1' {
            return Err(err(
                3,
                format!(
                    "unsupported version `{}` (expected TGV1)",
                    String::from_utf8_lossy(&bytes[..4])
                ),
            ));
        }
        let dtype = bytes[4];
        let size = elem_size(dtype).ok_or_else(|| err(4, format!("unknown dtype {dtype}")))?;
        let ndim = bytes[5] as usize;
        if ndim == 0 {
            return Err(err(5, "rank 0 is not supported".into()));
        }
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(err(bytes.len(), "truncated dimension list".into()));
        }
        let dims: Vec<usize> = (0..ndim)
            .map(|i| {
                let o = 6 + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
            })
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(size))
            .ok_or_else(|| err(6, "declared size overflows".into()))?;
        let available = bytes.len() - header;
        if available < n {
            return Err(err(
                bytes.len(),
                format!("truncated payload: header declares {n} bytes, found {available}"),
            ));
        }
        let payload = &bytes[header..header + n];
        let data = match dtype {
            1 => TgvData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TgvData::U8(payload.to_vec()),
            _ => TgvData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok((TgvArray { dims, data }, header + n))
    }

    /// Decodes a buffer holding exactly one array.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (arr, used) = Self::decode_prefix(bytes, 0)?;
        if used != bytes.len() {
            return Err(Error::Format {
                offset: used as u64,
                reason: format!(
                    "payload length mismatch: header declares {} bytes, file has {}",
                    used,
                    bytes.len()
                ),
            });
        }
        Ok(arr)
    }
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_tgv(array: &TgvArray, path: &Path) -> Result<()> {
    write_atomic(path, &array.encode())
}

pub fn load_tgv(path: &Path) -> Result<TgvArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TgvArray::decode(&bytes)
}
