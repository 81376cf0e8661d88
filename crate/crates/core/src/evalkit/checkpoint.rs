//! `SFCK` checkpoint files and their `.cfg` sidecar.
//!
//! Layout (little-endian): magic `SFCK`, `u32` version, `u32` entry count,
//! then per entry `u32` name length, UTF-8 name, `u32` rank, `u32` dims and
//! `f32` data. Names are `block.tensor`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::diffcore::{NdArray, ParamBlock};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SemanticFlowModel};
use crate::scalar::Scalar;
use crate::scene_synth::parse_key_values;

pub const MAGIC: &[u8; 4] = b"SFCK";
pub const VERSION: u32 = 1;

/// One decoded tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_checkpoint<T: Scalar>(blocks: &[ParamBlock<T>]) -> Result<Vec<u8>> {
    let mut names = BTreeSet::new();
    let mut entries = Vec::new();
    for b in blocks {
        for (name, t) in b.iter() {
            let full = format!("{}.{name}", b.name);
            if !names.insert(full.clone()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate tensor name {full}"
                )));
            }
            entries.push((full, t));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_len(entries.len())?.to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_len(t.shape().len())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&u32_len(d)?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::OutOfRange(format!("{n} does not fit in u32")))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::malformed(
                self.path,
                format!("truncated while reading {what}"),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes checkpoint bytes; `path` is only used in error messages.
pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Vec<CheckpointEntry>> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::malformed(path, "bad magic, not an SFCK checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::malformed(
            path,
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32("entry count")? as usize;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::malformed(path, format!("entry {i}: name is not UTF-8")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::malformed(path, format!("duplicate tensor {name}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::malformed(path, format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(len, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(CheckpointEntry { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::malformed(
            path,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, blocks: &[ParamBlock<T>]) -> Result<()> {
    let bytes = encode_checkpoint(blocks)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}

/// Strict load: every entry must name an existing tensor of the same shape
/// and every tensor must be covered.
pub fn load_into<T: Scalar>(
    path: &Path,
    entries: Vec<CheckpointEntry>,
    blocks: &mut [ParamBlock<T>],
) -> Result<()> {
    let mut pending: BTreeMap<String, CheckpointEntry> =
        entries.into_iter().map(|e| (e.name.clone(), e)).collect();
    for b in blocks.iter_mut() {
        let bname = b.name.clone();
        for (name, t) in b.iter_mut() {
            let full = format!("{bname}.{name}");
            let e = pending
                .remove(&full)
                .ok_or_else(|| Error::malformed(path, format!("missing tensor {full}")))?;
            if e.shape != t.shape() {
                return Err(Error::Shape(format!(
                    "{full}: checkpoint shape {:?}, model shape {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            let mut fresh = NdArray::new(
                e.shape,
                e.data.iter().map(|&v| T::lit(f64::from(v))).collect(),
            )?;
            fresh.requires_grad = t.requires_grad;
            *t = fresh;
        }
    }
    if let Some(name) = pending.keys().next() {
        return Err(Error::UnknownTensor(name.clone()));
    }
    Ok(())
}

/// Sidecar path holding the model configuration: `model.sfck` -> `model.cfg`.
pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("cfg")
}

/// Writes the checkpoint and its `.cfg` sidecar. `data` records the
/// dataset(s) the model was trained on.
pub fn save_model<T: Scalar>(
    path: &Path,
    model: &SemanticFlowModel<T>,
    data: &[PathBuf],
) -> Result<()> {
    save_checkpoint(path, &model.blocks)?;
    let mut cfg = model.config.to_key_values();
    if !data.is_empty() {
        let joined: Vec<String> = data.iter().map(|p| p.display().to_string()).collect();
        cfg.push_str(&format!("data={}\n", joined.join(",")));
    }
    let side = sidecar_path(path);
    std::fs::write(&side, cfg).map_err(|e| Error::io(&side, e))
}

/// A loaded model plus the dataset paths recorded next to it.
pub struct LoadedModel<T> {
    pub model: SemanticFlowModel<T>,
    pub data: Vec<PathBuf>,
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<LoadedModel<T>> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let mut kv = parse_key_values(&side, &text)?;
    let data = kv
        .remove("data")
        .map(|d| {
            d.split(',')
                .filter(|s| !s.is_empty())
                .map(PathBuf::from)
                .collect()
        })
        .unwrap_or_default();
    let config =
        ModelConfig::from_key_values(&kv).map_err(|e| Error::malformed(&side, e.to_string()))?;
    let mut model = SemanticFlowModel::new(config, 0)?;
    load_into(path, read_checkpoint(path)?, &mut model.blocks)?;
    Ok(LoadedModel { model, data })
}
