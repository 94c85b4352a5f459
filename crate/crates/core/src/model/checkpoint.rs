//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LBRG"  u32 version
//! u32 entry count, then per entry:
//!     u32 name length, name (UTF-8), u8 dtype code, u32 rank, u64 × rank dims
//! payloads in entry order, each in its entry's dtype
//! u64 metadata length, metadata (UTF-8 JSON)
//! ```
//!
//! Entry names are `param/<canonical>`, `adam_m/<canonical>` and
//! `adam_v/<canonical>`. The metadata holds the architecture, the sharing
//! map, optimizer counters and free-form caller data.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::arch::ArchConfig;
use crate::model::bundle::ModelBundle;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MAGIC: &[u8; 4] = b"LBRG";
pub const VERSION: u32 = 1;

const PARAM: &str = "param/";
const ADAM_M: &str = "adam_m/";
const ADAM_V: &str = "adam_v/";

#[derive(Serialize, Deserialize)]
struct Metadata {
    arch: ArchConfig,
    sharing_map: Vec<(String, String)>,
    optimizer: Option<OptimizerCounters>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct OptimizerCounters {
    step: u64,
    skipped: u64,
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub model: ModelBundle<T>,
    pub optimizer: Option<AdamState<T>>,
    pub extra: serde_json::Value,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Serializes `model`, optional optimizer state and `extra` to bytes.
pub fn encode_checkpoint<T: Scalar>(
    model: &ModelBundle<T>,
    optimizer: Option<&AdamState<T>>,
    extra: &serde_json::Value,
) -> Result<Vec<u8>> {
    let mut entries: Vec<(String, &Tensor<T>)> = model
        .params()
        .iter()
        .map(|(n, t)| (format!("{PARAM}{n}"), t))
        .collect();
    if let Some(opt) = optimizer {
        entries.extend(opt.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
        entries.extend(opt.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, entries.len() as u32);
    for (name, t) in &entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        put_u32(&mut out, t.ndim() as u32);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
    }
    for (_, t) in &entries {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let meta = Metadata {
        arch: model.arch().clone(),
        sharing_map: model.sharing_map(),
        optimizer: optimizer.map(|o| OptimizerCounters {
            step: o.step,
            skipped: o.skipped,
        }),
        extra: extra.clone(),
    };
    let meta = serde_json::to_vec(&meta)?;
    put_u64(&mut out, meta.len() as u64);
    out.extend_from_slice(&meta);
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &ModelBundle<T>,
    optimizer: Option<&AdamState<T>>,
    extra: &serde_json::Value,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, extra)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write-then-rename keeps a complete file at `path` at all times.
    let tmp = path.with_extension("ckpt.partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated while reading {what} at byte {} ({} bytes total)",
                self.at,
                self.bytes.len()
            )));
        };
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?)
            .map_err(|_| Error::CorruptCheckpoint(format!("{what} does not fit in memory")))
    }
}

struct Entry {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

fn read_payload<T: Scalar>(bytes: &[u8], dtype: DType) -> Vec<T> {
    match dtype {
        DType::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::from_f64_lossy(f64::read_le(c)))
            .collect(),
    }
}

/// Parses checkpoint bytes. Payloads stored in another dtype are converted.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let what = format!("manifest entry {i}");
        let len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| Error::CorruptCheckpoint(format!("{what}: name is not UTF-8")))?
            .to_string();
        let code = r.u8(&what)?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("`{name}`: unknown dtype {code}")))?;
        let rank = r.u32(&what)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len(&what)?);
        }
        entries.push(Entry { name, dtype, shape });
    }
    let mut tensors: BTreeMap<String, Tensor<T>> = BTreeMap::new();
    for e in &entries {
        let n = e
            .shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(e.dtype.size_of()))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("`{}`: shape overflows", e.name)))?;
        let data = read_payload(r.take(n, &format!("payload of `{}`", e.name))?, e.dtype);
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::CorruptCheckpoint(format!("`{}`: {err}", e.name)))?;
        if tensors.insert(e.name.clone(), t).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate entry `{}`", e.name)));
        }
    }
    let meta_len = r.len("metadata length")?;
    let meta: Metadata = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    if r.at != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after metadata",
            bytes.len() - r.at
        )));
    }

    let mut params = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_M) {
            m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix(ADAM_V) {
            v.insert(n.to_string(), t);
        } else {
            return Err(Error::CorruptCheckpoint(format!("unknown entry kind `{name}`")));
        }
    }
    // The stored layout must be exactly what the stored architecture builds.
    let template = ModelBundle::<T>::zeros(&meta.arch)
        .map_err(|e| Error::CorruptCheckpoint(format!("architecture: {e}")))?;
    if template.sharing_map() != meta.sharing_map {
        return Err(Error::CorruptCheckpoint(
            "sharing map disagrees with the stored architecture".into(),
        ));
    }
    for (name, t) in template.params() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    found: p.shape().to_vec(),
                    expected: t.shape().to_vec(),
                })
            }
            None => return Err(Error::CorruptCheckpoint(format!("missing parameter `{name}`"))),
        }
    }
    if params.len() != template.params().len() {
        return Err(Error::CorruptCheckpoint(
            "parameters not produced by the stored architecture".into(),
        ));
    }
    let aliases = meta.sharing_map.into_iter().collect();
    let model = ModelBundle::from_parts(meta.arch, params, aliases);
    let optimizer = match meta.optimizer {
        Some(c) => Some(AdamState {
            step: c.step,
            skipped: c.skipped,
            m,
            v,
        }),
        None if m.is_empty() && v.is_empty() => None,
        None => {
            return Err(Error::CorruptCheckpoint(
                "optimizer moments without optimizer counters".into(),
            ))
        }
    };
    Ok(Checkpoint {
        model,
        optimizer,
        extra: meta.extra,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    decode_checkpoint(&bytes)
}

/// Loads the parameters of the checkpoint at `path` into `model`, whose
/// layout must match parameter for parameter.
pub fn load_into<T: Scalar>(model: &mut ModelBundle<T>, path: &Path) -> Result<Checkpoint<T>> {
    let ckpt = load_checkpoint::<T>(path)?;
    model.copy_from(&ckpt.model)?;
    Ok(ckpt)
}
