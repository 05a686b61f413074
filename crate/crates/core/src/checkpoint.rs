//! Checkpoint directory layout:
//!
//! - `config.json`: model config and vocabulary
//! - `params.bin`: named f32 tensors (see [`write_tensors`])
//! - `params.manifest.json`: per-tensor shape and SHA-256
//! - `optimizer.bin` / `progress.json`: Adam moments and loop position, for `--resume`

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams, Tensor};
use crate::train::OptimizerState;
use crate::vocab::{VocabError, VocabSpec, Vocabulary};

const MAGIC: &[u8; 4] = b"CTLN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed tensor file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("integrity check failed for tensor {0}")]
    Checksum(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: ModelConfig,
    pub vocab: VocabSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Where a training run stands, so `--resume` continues at the next batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub next_batch: usize,
    pub step: usize,
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptimizerState>,
    pub progress: Option<Progress>,
}

fn tensor_sha(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for x in &t.data {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Writes `(name, f32, shape, little-endian payload)` records behind a small header.
pub fn write_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<Vec<TensorEntry>, CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &dim in &t.shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        entries.push(TensorEntry { name: name.clone(), shape: t.shape.clone(), sha256: tensor_sha(t) });
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&buf).map_err(io_err(path))?;
    Ok(entries)
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    let fail = |reason: &str| CheckpointError::Format { path: path.to_path_buf(), reason: reason.to_string() };
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| fail("truncated header"))? != MAGIC {
        return Err(fail("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| fail("truncated header"))?;
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let count = cur.u32().ok_or_else(|| fail("truncated header"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u32().ok_or_else(|| fail("truncated record"))? as usize;
        let name = String::from_utf8(cur.take(name_len).ok_or_else(|| fail("truncated name"))?.to_vec()).map_err(|_| fail("name not utf-8"))?;
        if cur.take(1).ok_or_else(|| fail("truncated dtype"))?[0] != DTYPE_F32 {
            return Err(fail("only f32 tensors are supported"));
        }
        let ndim = cur.u32().ok_or_else(|| fail("truncated shape"))? as usize;
        let shape = (0..ndim).map(|_| cur.u64().map(|d| d as usize)).collect::<Option<Vec<_>>>().ok_or_else(|| fail("truncated shape"))?;
        let n: usize = shape.iter().product();
        let payload = cur.take(n * 4).ok_or_else(|| fail("truncated payload"))?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push((name, Tensor { shape, data }));
    }
    if cur.pos != bytes.len() {
        return Err(fail("trailing bytes"));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Moves `loaded` tensors into `target`, checking names and shapes.
fn fill_params(target: &mut ModelParams, loaded: Vec<(String, Tensor)>, prefix: &str) -> Result<(), CheckpointError> {
    let names = target.names();
    if names.len() != loaded.len() {
        return Err(CheckpointError::Mismatch(format!("expected {} tensors, found {}", names.len(), loaded.len())));
    }
    for ((want, slot), (name, tensor)) in names.iter().zip(target.tensors_mut()).zip(loaded) {
        let want = format!("{prefix}{want}");
        if name != want || tensor.shape != slot.shape {
            return Err(CheckpointError::Mismatch(format!("tensor {name} {:?}, expected {want} {:?}", tensor.shape, slot.shape)));
        }
        *slot = tensor;
    }
    Ok(())
}

pub fn save(dir: &Path, params: &ModelParams, vocab: &Vocabulary, optimizer: Option<&OptimizerState>, progress: Option<Progress>) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if params.config.vocab_size != vocab.len() {
        return Err(CheckpointError::Mismatch(format!("model vocab {} vs vocabulary {}", params.config.vocab_size, vocab.len())));
    }
    let config = CheckpointConfig { model: params.config.clone(), vocab: vocab.spec() };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&config)?).map_err(io_err(&path))?;
    let entries = write_tensors(&dir.join("params.bin"), &params.named_tensors())?;
    let path = dir.join("params.manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&entries)?).map_err(io_err(&path))?;
    if let Some(opt) = optimizer {
        let mut named = Vec::new();
        for (prefix, moments) in [("m.", &opt.m), ("v.", &opt.v)] {
            named.extend(moments.named_tensors().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        write_tensors(&dir.join("optimizer.bin"), &named)?;
        let path = dir.join("optimizer.json");
        fs::write(&path, serde_json::to_string(&serde_json::json!({ "t": opt.t }))?).map_err(io_err(&path))?;
    }
    if let Some(progress) = progress {
        let path = dir.join("progress.json");
        fs::write(&path, serde_json::to_string_pretty(&progress)?).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = dir.join("config.json");
    let config: CheckpointConfig = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    let vocab = Vocabulary::from_spec(&config.vocab)?;
    if vocab.len() != config.model.vocab_size {
        return Err(CheckpointError::Mismatch(format!("model vocab {} vs vocabulary {}", config.model.vocab_size, vocab.len())));
    }
    let mut params = ModelParams::init(&config.model, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let loaded = read_tensors(&dir.join("params.bin"))?;
    let path = dir.join("params.manifest.json");
    let entries: Vec<TensorEntry> = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    if entries.len() != loaded.len() {
        return Err(CheckpointError::Mismatch("manifest and tensor file disagree".into()));
    }
    for (entry, (name, tensor)) in entries.iter().zip(&loaded) {
        if &entry.name != name || entry.shape != tensor.shape || entry.sha256 != tensor_sha(tensor) {
            return Err(CheckpointError::Checksum(name.clone()));
        }
    }
    fill_params(&mut params, loaded, "")?;

    let optimizer = if dir.join("optimizer.bin").exists() {
        let mut tensors = read_tensors(&dir.join("optimizer.bin"))?;
        let half = tensors.len() / 2;
        let v_tensors = tensors.split_off(half);
        let mut m = params.zeros_like();
        let mut v = params.zeros_like();
        fill_params(&mut m, tensors, "m.")?;
        fill_params(&mut v, v_tensors, "v.")?;
        let path = dir.join("optimizer.json");
        let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
        let t = meta["t"].as_u64().ok_or_else(|| CheckpointError::Mismatch("optimizer step missing".into()))?;
        Some(OptimizerState { m, v, t })
    } else {
        None
    };
    let path = dir.join("progress.json");
    let progress = if path.exists() { Some(serde_json::from_str(&fs::read_to_string(&path).map_err(io_err(&path))?)?) } else { None };
    Ok(Checkpoint { params, vocab, optimizer, progress })
}
