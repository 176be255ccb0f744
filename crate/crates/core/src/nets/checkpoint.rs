//! Checkpoint container.
//!
//! Layout: the 8-byte magic `MRDDCKPT`, a little-endian `u32` format version, a
//! `u64` header length, a JSON header, then the raw little-endian array data in
//! header order. The header carries a free-form `meta` record (the specs needed to
//! rebuild the graph) and one entry per named array.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{hex, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MRDDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StoredDType {
    F32,
    F64,
}

impl StoredDType {
    fn width(self) -> usize {
        match self {
            StoredDType::F32 => 4,
            StoredDType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: StoredDType,
    buffer: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<Entry>,
}

/// A named array as stored on disk; values are widened to f64 in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: StoredDType,
    pub buffer: bool,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, meta: serde_json::Value) -> Result<Self> {
        let mut arrays = Vec::new();
        let tagged = params
            .params()
            .iter()
            .map(|p| (p, false))
            .chain(params.buffers().iter().map(|b| (b, true)));
        for ((name, var), buffer) in tagged {
            let t = var.as_tensor();
            let dtype = match t.dtype() {
                DType::F64 => StoredDType::F64,
                _ => StoredDType::F32,
            };
            let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            arrays.push(NamedArray {
                name: name.clone(),
                shape: t.dims().to_vec(),
                dtype,
                buffer,
                values,
            });
        }
        Ok(Self { meta, arrays })
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Copies every stored array into the matching variable of `params`.
    /// Every variable must be present with the same shape; extra arrays are an error too.
    pub fn restore(&self, params: &ParamSet) -> Result<()> {
        let wanted = params.all().count();
        if wanted != self.arrays.len() {
            return Err(Error::invalid(format!(
                "checkpoint holds {} arrays, model expects {wanted}",
                self.arrays.len()
            )));
        }
        for (name, var) in params.all() {
            let array = self
                .get(name)
                .ok_or_else(|| Error::invalid(format!("checkpoint is missing `{name}`")))?;
            if array.shape != var.dims() {
                return Err(Error::shape(format!(
                    "`{name}`: checkpoint shape {:?}, model shape {:?}",
                    array.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_slice(&array.values, array.shape.as_slice(), var.device())?
                .to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Writes `params` plus `meta`; the file is written to a sibling temp path and renamed.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    write_checkpoint(path, &Checkpoint::from_params(params, meta)?)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        meta: ckpt.meta.clone(),
        arrays: ckpt
            .arrays
            .iter()
            .map(|a| Entry {
                name: a.name.clone(),
                shape: a.shape.clone(),
                dtype: a.dtype,
                buffer: a.buffer,
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for a in &ckpt.arrays {
        match a.dtype {
            StoredDType::F32 => a
                .values
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            StoredDType::F64 => a
                .values
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&out)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::format(path, format!("cannot open checkpoint: {e}")))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    let mut pos = body;
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for e in header.arrays {
        let n: usize = e.shape.iter().product();
        let end = pos + n * e.dtype.width();
        if end > bytes.len() {
            return Err(Error::format(path, format!("truncated data for `{}`", e.name)));
        }
        let raw = &bytes[pos..end];
        let values = match e.dtype {
            StoredDType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            StoredDType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        arrays.push(NamedArray {
            name: e.name,
            shape: e.shape,
            dtype: e.dtype,
            buffer: e.buffer,
            values,
        });
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after array data"));
    }
    Ok(Checkpoint {
        meta: header.meta,
        arrays,
    })
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}
