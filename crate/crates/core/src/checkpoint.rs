//! Checksummed tensor container.
//!
//! Layout: `"SPXC"`, `u32` version, then three sections, each
//! `[tag: 4 bytes][len: u64][crc32: u32][payload]`:
//! `CONF` (JSON), `TDIR` (JSON tensor directory), `DATA` (little-endian
//! `f32`). All integers are little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPXC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 4],
    pub dtype: String,
    /// Byte offset inside the `DATA` section.
    pub offset: u64,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    out.extend_from_slice(payload);
}

/// Serializes a JSON header and named tensors.
pub fn encode<S: Serialize>(conf: &S, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut dir = Vec::with_capacity(tensors.len());
    let mut data = Vec::new();
    for (name, t) in tensors {
        dir.push(TensorEntry {
            name: name.clone(),
            shape: t.shape,
            dtype: "f32".into(),
            offset: data.len() as u64,
        });
        for v in &t.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(data.len() + 4096);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    section(&mut out, b"CONF", &serde_json::to_vec(conf)?);
    section(&mut out, b"TDIR", &serde_json::to_vec(&dir)?);
    section(&mut out, b"DATA", &data);
    Ok(out)
}

pub fn save<S: Serialize>(path: &Path, conf: &S, tensors: &[(String, &Tensor<f32>)]) -> Result<()> {
    let bytes = encode(conf, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Header JSON plus tensors in stored order.
pub struct Container {
    pub conf: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(self.tensors.swap_remove(i).1)
    }
}

fn read_section<'a>(bytes: &'a [u8], at: &mut usize, tag: &[u8; 4]) -> Result<&'a [u8]> {
    let head = bytes
        .get(*at..*at + 16)
        .ok_or_else(|| Error::Format(format!("missing section {}", String::from_utf8_lossy(tag))))?;
    if &head[..4] != tag {
        return Err(Error::Format(format!(
            "expected section {}, found {}",
            String::from_utf8_lossy(tag),
            String::from_utf8_lossy(&head[..4])
        )));
    }
    let len = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(head[12..16].try_into().unwrap());
    let start = *at + 16;
    let payload = bytes
        .get(start..start.checked_add(len).ok_or_else(|| Error::Format("section length overflow".into()))?)
        .ok_or_else(|| Error::Format(format!("section {} truncated", String::from_utf8_lossy(tag))))?;
    if crc32fast::hash(payload) != crc {
        return Err(Error::Checksum {
            section: String::from_utf8_lossy(tag).into_owned(),
        });
    }
    *at = start + len;
    Ok(payload)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let mut at = 8;
    let conf = serde_json::from_slice(read_section(bytes, &mut at, b"CONF")?)?;
    let dir: Vec<TensorEntry> = serde_json::from_slice(read_section(bytes, &mut at, b"TDIR")?)?;
    let data = read_section(bytes, &mut at, b"DATA")?;
    if at != bytes.len() {
        return Err(Error::Format("trailing bytes after DATA".into()));
    }
    let mut tensors = Vec::with_capacity(dir.len());
    for e in dir {
        if e.dtype != "f32" {
            return Err(Error::Format(format!("unsupported dtype {} for {}", e.dtype, e.name)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = data
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Format(format!("tensor {} out of range", e.name)))?;
        let vals = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((e.name, Tensor::from_vec(e.shape, vals)));
    }
    Ok(Container { conf, tensors })
}

pub fn load(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
