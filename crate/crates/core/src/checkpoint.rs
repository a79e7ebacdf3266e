//! Self-describing checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian u32 version, a length-prefixed
//! JSON header (model config, vocabulary, parameter names and shapes,
//! optimizer scalars), then raw little-endian f64 payloads in header order:
//! parameter values, then optimizer first and second moments when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{Array, OptimizerState, Scalar};
use crate::token::Vocabulary;

const MAGIC: &[u8; 8] = b"MRECCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    step: u64,
    best_valid_loss: Option<f64>,
    plateau_epochs: usize,
    stalled_epochs: usize,
    stop: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    params: Vec<ParamHeader>,
    optimizer: Option<OptimizerHeader>,
    max_decode_len: usize,
}

/// A trained model plus everything needed to resume or predict.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocabulary,
    pub optimizer: Option<OptimizerState>,
    pub max_decode_len: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    vocab: &Vocabulary,
    optimizer: Option<&OptimizerState>,
    max_decode_len: usize,
) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        vocab: vocab.tokens().iter().map(|t| t.text.clone()).collect(),
        params: model
            .params
            .entries()
            .iter()
            .map(|e| ParamHeader {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
        optimizer: optimizer.map(|o| OptimizerHeader {
            learning_rate: o.learning_rate as f64,
            step: o.step,
            best_valid_loss: o.best_valid_loss.map(|v| v as f64),
            plateau_epochs: o.plateau_epochs,
            stalled_epochs: o.stalled_epochs,
            stop: o.stop,
        }),
        max_decode_len,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("serialize header: {}", e)))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
    w.write_all(&header_bytes)?;
    for entry in model.params.entries() {
        write_array(&mut w, &entry.value)?;
    }
    if let Some(o) = optimizer {
        for m in &o.first_moments {
            write_array(&mut w, m)?;
        }
        for v in &o.second_moments {
            write_array(&mut w, v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let header_len = r.read_u64::<LittleEndian>()? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("parse header: {}", e)))?;

    let vocab = Vocabulary::from_lines(header.vocab.iter().map(|s| s.as_str()))?;

    // Rebuild the skeleton, then overwrite values; structural mismatches
    // between the header and the config are hard errors.
    let mut model = Model::new(header.config.clone(), vocab.len(), 0)?;
    if model.params.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {} parameters, config builds {}",
            header.params.len(),
            model.params.len()
        )));
    }
    for (entry, ph) in model.params.entries_mut().iter_mut().zip(&header.params) {
        if entry.name != ph.name || entry.value.shape() != ph.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: expected {} {:?}, found {} {:?}",
                entry.name,
                entry.value.shape(),
                ph.name,
                ph.shape
            )));
        }
        entry.value = read_array(&mut r, &ph.shape)?;
    }

    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut state = OptimizerState::new(&model.params, oh.learning_rate as Scalar);
            state.step = oh.step;
            state.best_valid_loss = oh.best_valid_loss.map(|v| v as Scalar);
            state.plateau_epochs = oh.plateau_epochs;
            state.stalled_epochs = oh.stalled_epochs;
            state.stop = oh.stop;
            for m in state.first_moments.iter_mut() {
                *m = read_array(&mut r, m.shape())?;
            }
            for v in state.second_moments.iter_mut() {
                *v = read_array(&mut r, v.shape())?;
            }
            Some(state)
        }
    };

    Ok(Checkpoint {
        model,
        vocab,
        optimizer,
        max_decode_len: header.max_decode_len,
    })
}

fn write_array(w: &mut impl Write, a: &Array) -> Result<()> {
    for &v in a.data() {
        w.write_f64::<LittleEndian>(v as f64)?;
    }
    Ok(())
}

fn read_array(r: &mut impl Read, shape: &[usize]) -> Result<Array> {
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(r.read_f64::<LittleEndian>()? as Scalar);
    }
    Array::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::OptimizerState;
    use crate::token::tokenize;

    fn small_vocab() -> Vocabulary {
        Vocabulary::build(&[tokenize("x+1").unwrap(), tokenize("2").unwrap()]).unwrap()
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let vocab = small_vocab();
        let model = Model::new(ModelConfig::tiny(), vocab.len(), 42).unwrap();
        let mut state = OptimizerState::new(&model.params, 3e-4);
        state.step = 17;
        state.best_valid_loss = Some(0.25);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &vocab, Some(&state), 24).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.config, model.config);
        assert_eq!(loaded.vocab, vocab);
        assert_eq!(loaded.max_decode_len, 24);
        for (a, b) in loaded
            .model
            .params
            .entries()
            .iter()
            .zip(model.params.entries())
        {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
        let o = loaded.optimizer.unwrap();
        assert_eq!(o.step, 17);
        assert_eq!(o.best_valid_loss, Some(0.25));
        assert_eq!(o.first_moments.len(), model.params.len());
    }

    #[test]
    fn save_is_deterministic() {
        let vocab = small_vocab();
        let model = Model::new(ModelConfig::tiny(), vocab.len(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &model, &vocab, None, 10).unwrap();
        save_checkpoint(&b, &model, &vocab, None, 10).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn truncated_file_is_checkpoint_error() {
        let vocab = small_vocab();
        let model = Model::new(ModelConfig::tiny(), vocab.len(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, &vocab, None, 10).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
