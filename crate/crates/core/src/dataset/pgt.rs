//! `PGT1` binary arrays.
//!
//! Layout: magic `PGT1`, `u8` version (1), `u8` dtype (1 = `f32` LE,
//! 2 = one byte per boolean), `u32` LE rank, `rank` `u32` LE dims, then the
//! row-major payload.

use std::path::Path;

use crate::{Error, Result};

pub const PGT_MAGIC: &[u8; 4] = b"PGT1";
pub const PGT_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum PgtData {
    F32(Vec<f32>),
    Bool(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgtArray {
    pub dims: Vec<u32>,
    pub data: PgtData,
}

impl PgtArray {
    fn element_count(dims: &[u32]) -> Option<usize> {
        dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d as usize))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(PGT_MAGIC);
        out.push(PGT_VERSION);
        out.push(match self.data {
            PgtData::F32(_) => 1,
            PgtData::Bool(_) => 2,
        });
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            PgtData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            PgtData::Bool(v) => out.extend(v.iter().map(|b| u8::from(*b))),
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |msg: &str| Error::Truncated {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 4 {
            return Err(truncated("missing magic"));
        }
        if &bytes[..4] != PGT_MAGIC {
            return Err(format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < 10 {
            return Err(truncated("header cut short"));
        }
        if bytes[4] != PGT_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: bytes[4],
                expected: PGT_VERSION,
            });
        }
        let dtype = bytes[5];
        let rank = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dims_end = rank
            .checked_mul(4)
            .and_then(|r| r.checked_add(10))
            .ok_or_else(|| format(format!("rank {rank} is too large")))?;
        if bytes.len() < dims_end {
            return Err(truncated("dimension list cut short"));
        }
        let dims: Vec<u32> = bytes[10..dims_end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = Self::element_count(&dims).ok_or_else(|| format("dimensions overflow".into()))?;
        let width = match dtype {
            1 => 4,
            2 => 1,
            other => return Err(format(format!("unknown dtype code {other}"))),
        };
        let payload = &bytes[dims_end..];
        let need = count * width;
        if payload.len() < need {
            return Err(truncated(&format!("payload has {} of {need} bytes", payload.len())));
        }
        if payload.len() > need {
            return Err(format(format!("{} trailing bytes", payload.len() - need)));
        }
        let data = if dtype == 1 {
            PgtData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        } else {
            let mut v = Vec::with_capacity(count);
            for &b in payload {
                match b {
                    0 => v.push(false),
                    1 => v.push(true),
                    other => return Err(format(format!("boolean byte {other}"))),
                }
            }
            PgtData::Bool(v)
        };
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn into_f32(self, path: &Path) -> Result<(Vec<u32>, Vec<f32>)> {
        match self.data {
            PgtData::F32(v) => Ok((self.dims, v)),
            PgtData::Bool(_) => Err(Error::Format {
                path: path.to_path_buf(),
                msg: "expected f32 payload, found bool".into(),
            }),
        }
    }

    pub fn into_bool(self, path: &Path) -> Result<(Vec<u32>, Vec<bool>)> {
        match self.data {
            PgtData::Bool(v) => Ok((self.dims, v)),
            PgtData::F32(_) => Err(Error::Format {
                path: path.to_path_buf(),
                msg: "expected bool payload, found f32".into(),
            }),
        }
    }
}
