//! Checkpoint format: one binary file that is self-contained for sampling.
//!
//! Layout, all integers little-endian:
//!   8-byte magic "IMMGPT01"
//!   u32 header length, then that many bytes of JSON holding the model
//!     config and the character vocabulary
//!   u32 tensor count, then per tensor:
//!     u16 name length, name bytes (UTF-8)
//!     u8 rank, rank x u32 dims
//!     numel x f32 values
//!
//! Values are stored in 32-bit regardless of the in-memory element type, so
//! saving a 64-bit model rounds its parameters.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::element::{c, Element};
use crate::model::{GPTModel, ModelConfig, ModelError};
use crate::tokenizer::{TokenizerError, Vocab};

const MAGIC: &[u8; 8] = b"IMMGPT01";

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    /// Structural problem with the file; the message says what and where.
    Format(String),
    Model(ModelError),
    Vocab(TokenizerError),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(m) => write!(f, "malformed checkpoint: {m}"),
            CheckpointError::Model(e) => write!(f, "{e}"),
            CheckpointError::Vocab(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(e)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    /// The vocabulary's own JSON object, embedded verbatim.
    vocab: serde_json::Value,
}

/// Writes the model and its vocabulary to one file.
pub fn save<E: Element>(
    model: &GPTModel<E>,
    vocab: &Vocab,
    path: &Path,
) -> Result<(), CheckpointError> {
    let header = Header {
        format: "imm-gpt-checkpoint".into(),
        version: 1,
        config: model.config().clone(),
        vocab: serde_json::from_str(&vocab.to_json())
            .expect("vocab JSON is valid by construction"),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    let params: Vec<(&str, _)> = model.named_params().collect();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, id) in params {
        let shape = model.tape().shape(id);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in model.tape().data(id) {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint back into a freshly constructed model. Every
/// parameter the config implies must be present with its exact shape.
pub fn load<E: Element>(path: &Path) -> Result<(GPTModel<E>, Vocab), CheckpointError> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(8, "magic")? != MAGIC {
        return Err(CheckpointError::Format(
            "bad magic; not a checkpoint file".into(),
        ));
    }
    let hlen = cur.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen, "header")?)
        .map_err(|e| CheckpointError::Format(format!("header JSON: {e}")))?;
    if header.format != "imm-gpt-checkpoint" || header.version != 1 {
        return Err(CheckpointError::Format(format!(
            "unsupported format {} version {}",
            header.format, header.version
        )));
    }
    let vocab = Vocab::from_json(&header.vocab.to_string()).map_err(CheckpointError::Vocab)?;
    let mut model = GPTModel::<E>::new(header.config)?;

    let count = cur.u32("tensor count")? as usize;
    let expected: Vec<(String, Vec<usize>)> = model
        .named_params()
        .map(|(n, id)| (n.to_string(), model.tape().shape(id).to_vec()))
        .collect();
    if count != expected.len() {
        return Err(CheckpointError::Format(format!(
            "{} tensors in file, model needs {}",
            count,
            expected.len()
        )));
    }
    let mut loaded = vec![false; expected.len()];
    for _ in 0..count {
        let nlen = cur.u16("name length")? as usize;
        let name = std::str::from_utf8(cur.take(nlen, "name")?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 4, &format!("values of {name}"))?;
        let idx = expected
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| {
                CheckpointError::Format(format!("unexpected tensor {name} for this config"))
            })?;
        if expected[idx].1 != shape {
            return Err(CheckpointError::Format(format!(
                "tensor {name} has shape {shape:?}, model expects {:?}",
                expected[idx].1
            )));
        }
        if loaded[idx] {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
        loaded[idx] = true;
        let dst = model
            .param_data_mut(&name)
            .expect("name was just matched against the model");
        for (v, chunk) in dst.iter_mut().zip(raw.chunks_exact(4)) {
            *v = c(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
    }
    if let Some(i) = loaded.iter().position(|&l| !l) {
        return Err(CheckpointError::Format(format!(
            "missing tensor {}",
            expected[i].0
        )));
    }
    Ok((model, vocab))
}
