//! `UNET` model files.
//!
//! Layout: magic `UNET`, `u8` version (1), `u32` LE array count, then per
//! array a `u16` LE name length, the UTF-8 name, `u32` LE rank, `rank`
//! `u32` LE dims and the `f32` LE payload; finally a `u32` LE length and
//! the JSON metadata (architecture, seed, epochs).

use std::path::Path;

use super::net::{ModelMeta, ModelParams, ParamArray};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"UNET";
pub const MODEL_VERSION: u8 = 1;

pub fn encode_params(params: &ModelParams) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 4 * params.count());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(params.arrays.len() as u32).to_le_bytes());
    for a in &params.arrays {
        let name = a.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for d in &a.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(&params.meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                msg: format!("{what} cut short at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let format = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MODEL_MAGIC {
        return Err(format("bad magic".into()));
    }
    let version = r.take(1, "version")?[0];
    if version != MODEL_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let count = r.u32("array count")? as usize;
    let mut raw = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| format("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, d| a.checked_mul(*d))
            .ok_or_else(|| format(format!("dims of `{name}` overflow")))?;
        let payload = r.take(
            n.checked_mul(4).ok_or_else(|| format("array too large".into()))?,
            &format!("array `{name}`"),
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        raw.push(ParamArray { name, dims, data });
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    if r.pos != bytes.len() {
        return Err(format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let expected = meta.config.array_names();
    for a in &raw {
        if !expected.contains(&a.name) {
            return Err(Error::UnknownArray(a.name.clone()));
        }
    }
    let template = ModelParams::<f32>::zeros(&meta.config)?;
    let mut arrays = Vec::with_capacity(template.arrays.len());
    for t in template.arrays {
        let mut found = raw.iter().filter(|a| a.name == t.name);
        let a = found
            .next()
            .ok_or_else(|| format(format!("missing array `{}`", t.name)))?;
        if found.next().is_some() {
            return Err(format(format!("duplicate array `{}`", t.name)));
        }
        if a.dims != t.dims {
            return Err(Error::Shape(format!(
                "array `{}` has dims {:?}, architecture needs {:?}",
                t.name, a.dims, t.dims
            )));
        }
        arrays.push(a.clone());
    }
    let params = ModelParams { meta, arrays };
    if !params.all_finite() {
        return Err(format("non-finite parameter".into()));
    }
    Ok(params)
}

pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_params(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, path)
}
