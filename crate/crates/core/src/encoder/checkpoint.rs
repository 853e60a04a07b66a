//! Binary tensor checkpoints.
//!
//! Layout: magic `HBCK01`, a little-endian `u32` manifest length, the UTF-8
//! manifest (`name dtype d0xd1...` per line), then every tensor's values in
//! manifest order as little-endian floats.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"HBCK01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(tag: &str) -> Result<Self> {
        match tag {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint(path: &Path, module: &dyn Module, dtype: Dtype) -> Result<()> {
    let mut manifest = String::new();
    let mut payload = Vec::new();
    module.visit("", &mut |t| {
        let dims: Vec<String> = t.shape.iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{} {} {}\n", t.name, dtype.tag(), dims.join("x")));
        for &v in t.value {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
    });
    let mut bytes = Vec::with_capacity(10 + manifest.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    bytes.extend_from_slice(manifest.as_bytes());
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<StoredTensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<StoredTensor>> {
    let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
    if bytes.len() < 10 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let manifest = bytes
        .get(10..10 + len)
        .ok_or_else(|| bad("truncated manifest"))?;
    let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
    let mut cursor = 10 + len;
    let mut tensors = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split(' ');
        let (Some(name), Some(tag), Some(dims), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(&format!("malformed manifest line {line:?}")));
        };
        let dtype = Dtype::parse(tag)?;
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(&format!("bad shape {dims:?}")))?;
        let count: usize = shape.iter().product();
        let end = cursor + count * dtype.width();
        let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated payload"))?;
        let data = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        cursor = end;
        tensors.push(StoredTensor {
            name: name.to_string(),
            shape,
            data,
        });
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(tensors)
}

/// Copies stored values into `module`. Every module tensor must be present
/// with a matching shape; unused stored tensors are an error unless
/// `allow_extra` is set.
pub fn load_tensors(module: &mut dyn Module, tensors: &[StoredTensor], allow_extra: bool) -> Result<()> {
    let by_name: BTreeMap<&str, &StoredTensor> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut used = 0;
    let mut failure = None;
    module.visit_mut("", &mut |t| {
        if failure.is_some() {
            return;
        }
        match by_name.get(t.name) {
            None => failure = Some(format!("missing tensor {}", t.name)),
            Some(s) if s.shape != t.shape => {
                failure = Some(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    t.name, s.shape, t.shape
                ))
            }
            Some(s) => {
                t.value.copy_from_slice(&s.data);
                used += 1;
            }
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Format(format!("checkpoint: {msg}")));
    }
    if !allow_extra && used != tensors.len() {
        return Err(Error::Format(format!(
            "checkpoint: {} unexpected tensors",
            tensors.len() - used
        )));
    }
    Ok(())
}

/// `<path>.config`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let side = sidecar_path(path);
    let text: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut pairs = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("{}: bad line {line:?}", side.display())))?;
        pairs.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(pairs)
}

/// SHA-256 over names, shapes and values of the tensors selected by `keep`.
pub fn tensor_digest(module: &dyn Module, keep: &dyn Fn(&str) -> bool) -> String {
    let mut hasher = Sha256::new();
    module.visit("", &mut |t| {
        if !keep(t.name) {
            return;
        }
        hasher.update(t.name.as_bytes());
        for &d in t.shape {
            hasher.update((d as u64).to_le_bytes());
        }
        for &v in t.value {
            hasher.update(v.to_le_bytes());
        }
    });
    hex::encode(hasher.finalize())
}
