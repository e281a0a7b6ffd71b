//! Checkpoint file: magic line, one JSON header line, raw little-endian f32 weights.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::vocab::Vocab;
use super::LmError;

pub const CHECKPOINT_MAGIC: &str = "BTLAB-CKPT-V1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    n_params: usize,
    dtype: String,
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab: Vocab,
    /// Free-form provenance (training config, step counts, ...).
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), LmError> {
    let header = Header {
        config: ckpt.model.config.clone(),
        vocab: ckpt.vocab.clone(),
        n_params: ckpt.model.params.len(),
        dtype: "f32le".into(),
        meta: ckpt.meta.clone(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in &ckpt.model.params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, LmError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(LmError::Checkpoint(format!("bad magic {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line)?;
    if header.dtype != "f32le" {
        return Err(LmError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.n_params * 4 {
        return Err(LmError::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            header.n_params * 4
        )));
    }
    let params = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let model = Model::from_params(header.config, params)?;
    Ok(Checkpoint { model, vocab: header.vocab, meta: header.meta })
}
