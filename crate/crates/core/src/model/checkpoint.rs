//! Checkpoint files.
//!
//! Layout, little-endian: magic `LFCK`, `u32` version, `u64` config
//! fingerprint, `u32` length plus the config JSON, `u32` dtype (0 = f32,
//! 1 = f64), `u32` parameter count, then per parameter a `u32` name length,
//! the UTF-8 name, `u32` group, `u32` rank and `rank` `u32` extents. The
//! payload follows: every tensor in directory order.

use std::fs;
use std::path::Path;

use diffcore::Tensor;

use super::config::NetConfig;
use super::params::{Group, ModelParams};
use crate::error::{io_err, Error, Result};
use crate::lightfield::DType;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LFCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(params, dtype)).map_err(io_err(path))
}

pub fn to_bytes(params: &ModelParams, dtype: DType) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    u32le(&mut out, VERSION as usize);
    out.extend_from_slice(&params.config().fingerprint().to_le_bytes());
    let json = params.config().to_json();
    u32le(&mut out, json.len());
    out.extend_from_slice(json.as_bytes());
    u32le(&mut out, if dtype == DType::F32 { 0 } else { 1 });
    u32le(&mut out, params.tensors().len());
    for (name, group, t) in params.named() {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, group.code() as usize);
        u32le(&mut out, t.rank());
        for &d in t.shape() {
            u32le(&mut out, d);
        }
    }
    for t in params.tensors() {
        match dtype {
            DType::F32 => out.extend_from_slice(&t.to_f32_le_bytes()),
            DType::F64 => out.extend_from_slice(&t.to_f64_le_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Length {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn format(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

/// Loads a checkpoint with the configuration stored inside it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, path, None)
}

/// Loads a checkpoint and requires it to match `expected`; a mismatch names
/// the first differing config field.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NetConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, path, Some(expected))
}

pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&NetConfig>) -> Result<ModelParams> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.format("magic is not \"LFCK\""));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.format(format!("version {version} is not supported")));
    }
    let fingerprint = r.u64()?;
    let len = r.u32()?;
    let json = std::str::from_utf8(r.take(len)?)
        .map_err(|e| r.format(format!("config is not UTF-8: {e}")))?;
    let config: NetConfig = serde_json::from_str(json).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    if config.fingerprint() != fingerprint {
        return Err(r.format("config fingerprint does not match the stored config"));
    }
    if let Some(exp) = expected {
        if exp.fingerprint() != fingerprint {
            return Err(first_difference(exp, &config));
        }
    }
    let dtype = match r.u32()? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(r.format(format!("dtype code {other} is not 0 or 1"))),
    };
    let count = r.u32()?;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8_lossy(r.take(n)?).into_owned();
        let group = r.u32()?;
        Group::from_code(group as u32)
            .ok_or_else(|| r.format(format!("{name}: group code {group} unknown")))?;
        let rank = r.u32()?;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        shapes.push(dims);
    }
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let payload: usize = shapes
        .iter()
        .map(|s| s.iter().product::<usize>() * width)
        .sum();
    if bytes.len() != r.pos + payload {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: r.pos + payload,
            found: bytes.len(),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n: usize = shape.iter().product::<usize>() * width;
        let chunk = r.take(n)?;
        tensors.push(match dtype {
            DType::F32 => Tensor::from_f32_le_bytes(&shape, chunk)?,
            DType::F64 => Tensor::from_f64_le_bytes(&shape, chunk)?,
        });
    }
    ModelParams::from_tensors(&config, tensors)
}

fn first_difference(expected: &NetConfig, found: &NetConfig) -> Error {
    let e = serde_json::to_value(expected).expect("config serializes");
    let f = serde_json::to_value(found).expect("config serializes");
    let (eo, fo) = (
        e.as_object().expect("object"),
        f.as_object().expect("object"),
    );
    for (k, ev) in eo {
        let fv = fo.get(k).cloned().unwrap_or(serde_json::Value::Null);
        if *ev != fv {
            return Error::Incompatible {
                field: k.clone(),
                expected: ev.to_string(),
                found: fv.to_string(),
            };
        }
    }
    Error::Incompatible {
        field: "fingerprint".into(),
        expected: format!("{:016x}", expected.fingerprint()),
        found: format!("{:016x}", found.fingerprint()),
    }
}
