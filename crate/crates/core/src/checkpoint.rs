//! Checkpoint files.
//!
//! ```text
//! "MCGC" | version: u32 LE | header length: u64 LE | JSON header | payload | SHA-256
//! ```
//!
//! The header records the step, the config and vocabulary documents, and an
//! index of `name → (group, shape, dtype, offset, length)` into the payload,
//! which holds little-endian `f64` values. The trailing digest covers every
//! preceding byte and is verified before anything is parsed.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::McgModel;
use crate::params::{Mat, ParameterTree};
use crate::text::Vocabulary;
use crate::training::AdamW;

pub const MAGIC: &[u8; 4] = b"MCGC";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub group: ArrayGroup,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub step: usize,
    pub adam_t: u64,
    pub config: String,
    pub vocab: String,
    pub arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: McgModel,
    pub optimizer: AdamW,
    pub step: usize,
}

pub fn encode(model: &McgModel, opt: &AdamW, step: usize) -> Vec<u8> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: &str, group: ArrayGroup, m: &Mat| {
        let offset = payload.len() as u64;
        for v in m.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        arrays.push(ArrayEntry {
            name: name.to_string(),
            group,
            shape: [m.nrows(), m.ncols()],
            dtype: "f64".into(),
            offset,
            length: payload.len() as u64 - offset,
        });
    };
    for (i, (name, p)) in model.params.iter().enumerate() {
        push(name, ArrayGroup::Param, p);
        push(name, ArrayGroup::AdamM, &opt.m[i]);
        push(name, ArrayGroup::AdamV, &opt.v[i]);
    }
    let header = Header {
        step,
        adam_t: opt.t,
        config: model.config.to_text(),
        vocab: model.vocab.to_text(),
        arrays,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes atomically: a sibling temporary file is renamed over `path`.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &McgModel,
    opt: &AdamW,
    step: usize,
) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&encode(model, opt, step))?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Checks magic, version and digest, then returns the header and payload.
fn verified(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    if bytes.len() < PREAMBLE + DIGEST {
        return Err(Error::Checksum("file is truncated".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum("digest does not match contents".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Checkpoint("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&body[PREAMBLE..header_end])
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    Ok((header, &body[header_end..]))
}

fn read_array(payload: &[u8], e: &ArrayEntry) -> Result<Mat> {
    let [r, c] = e.shape;
    let (start, len) = (e.offset as usize, e.length as usize);
    if e.dtype != "f64"
        || len != r * c * 8
        || start.checked_add(len).is_none_or(|end| end > payload.len())
    {
        return Err(Error::Checkpoint(format!("bad index entry for {}", e.name)));
    }
    let values = payload[start..start + len]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Array2::from_shape_vec((r, c), values).unwrap())
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = verified(bytes)?;
    let config = Config::parse_text(&header.config)?;
    let vocab = Vocabulary::parse(&header.vocab)?;
    let mut params = ParameterTree::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for e in &header.arrays {
        let a = read_array(payload, e)?;
        match e.group {
            ArrayGroup::Param => {
                params.insert(e.name.clone(), a)?;
            }
            ArrayGroup::AdamM => m.push(a),
            ArrayGroup::AdamV => v.push(a),
        }
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Checkpoint(
            "optimizer moments do not match parameters".into(),
        ));
    }
    Ok(Checkpoint {
        model: McgModel {
            config,
            vocab,
            params,
        },
        optimizer: AdamW {
            m,
            v,
            t: header.adam_t,
        },
        step: header.step,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

/// Verified header only, for listing a checkpoint's contents.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = fs::read(path)?;
    Ok(verified(&bytes)?.0)
}

/// Outcome of copying weights between trees by name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub matched: Vec<String>,
    /// Target arrays absent from the source or with a different shape.
    pub unmatched: Vec<String>,
    /// Source arrays with no counterpart in the target.
    pub unused: Vec<String>,
}

/// Copies every same-named, same-shaped array from `source` into `target`.
pub fn import_weights(target: &mut ParameterTree, source: &ParameterTree) -> ImportReport {
    let mut report = ImportReport::default();
    let names: Vec<String> = target.names().map(str::to_string).collect();
    for name in &names {
        match source.get(name) {
            Some(src) if src.dim() == target.get(name).unwrap().dim() => {
                *target.get_mut(name).unwrap() = src.clone();
                report.matched.push(name.clone());
            }
            _ => report.unmatched.push(name.clone()),
        }
    }
    report.unused = source
        .names()
        .filter(|n| target.index_of(n).is_none())
        .map(str::to_string)
        .collect();
    report
}
