//! Binary model container and atomic file output.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "CAC1" | version: u32 | count: u32 |
//!   count × ( name_len: u32 | name: utf-8 | dtype: u8 | rank: u32 | dims: rank × u64 | payload )
//! ```
//!
//! dtype 0 is `f32` (4 bytes per element), dtype 1 is raw bytes. The model
//! spec travels as the byte tensor [`SPEC_TENSOR`] holding its JSON text.

use std::io::Write;
use std::path::Path;

use crate::error::{CacError, Result};
use crate::nn::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CAC1";
pub const VERSION: u32 = 1;
pub const SPEC_TENSOR: &str = "meta.model_spec";
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Writes `bytes` to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CacError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| CacError::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| CacError::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| CacError::io(path, e.error))?;
    Ok(())
}

fn put_header(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize]) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(dtype);
    out.extend((dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend((d as u64).to_le_bytes());
    }
}

pub fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    let spec = serde_json::to_vec(model.spec()).map_err(|e| CacError::invalid(format!("model spec: {e}")))?;
    let state = model.state();
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((state.len() as u32 + 1).to_le_bytes());
    put_header(&mut out, SPEC_TENSOR, DTYPE_U8, &[spec.len()]);
    out.extend(&spec);
    for (name, t) in &state {
        put_header(&mut out, name, DTYPE_F32, t.shape());
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: String) -> CacError {
        CacError::Format { path: self.source.to_string(), detail }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated {what} at byte offset {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], source: &str) -> Result<Model<f32>> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err("bad magic, expected CAC1".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut spec: Option<ModelSpec> = None;
    let mut state = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(format!("tensor {i}: name is not utf-8")))?
            .to_string();
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64("dimension")? as usize);
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.err(format!("tensor {name}: dimensions overflow")))?;
        match dtype {
            DTYPE_U8 if name == SPEC_TENSOR => {
                let raw = r.take(numel, "model spec")?;
                spec = Some(
                    serde_json::from_slice(raw).map_err(|e| r.err(format!("model spec: {e}")))?,
                );
            }
            DTYPE_F32 => {
                let nbytes = numel
                    .checked_mul(4)
                    .ok_or_else(|| r.err(format!("tensor {name}: payload overflow")))?;
                let raw = r.take(nbytes, &format!("payload of {name}"))?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                state.push((name, Tensor::new(dims, data)?));
            }
            other => return Err(r.err(format!("tensor {name}: unknown dtype tag {other}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes after last tensor", bytes.len() - r.pos)));
    }
    let spec = spec.ok_or_else(|| r.err(format!("missing {SPEC_TENSOR}")))?;
    spec.validate()?;
    Model::from_state(&spec, state).map_err(|e| r.err(e.to_string()))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>) -> Result<()> {
    write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CacError::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}
