//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//! `FUSEBED1`, u64 header length, JSON header (configs, vocabulary, optimizer
//! step), u64 tensor count, then per tensor: u64 name length, UTF-8 name, u64
//! rows, u64 cols, `rows*cols` f64 values. Parameters come first in visiting
//! order, followed by `adam.m.<name>` and `adam.v.<name>` moments.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelConfig};
use crate::tensor::{Module, Tensor2D};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"FUSEBED1";

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    vocab: Vec<String>,
    optimizer_step: u64,
    epochs_done: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: HybridModel,
    pub optimizer: OptimizerState,
    pub train: TrainConfig,
    pub epochs_done: usize,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor2D) {
    put_u64(out, name.len() as u64);
    out.extend_from_slice(name.as_bytes());
    put_u64(out, t.rows() as u64);
    put_u64(out, t.cols() as u64);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes the checkpoint to bytes.
pub fn encode_checkpoint(
    model: &HybridModel,
    optimizer: &OptimizerState,
    train: &TrainConfig,
    epochs_done: usize,
) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        train: train.clone(),
        vocab: model.vocab.tokens().to_vec(),
        optimizer_step: optimizer.step,
        epochs_done,
    })?;
    let mut out = Vec::with_capacity(8 * model.num_params() * 3 + header.len() + 64);
    out.extend_from_slice(MAGIC);
    put_u64(&mut out, header.len() as u64);
    out.extend_from_slice(&header);
    let mut names = Vec::new();
    model.visit_params(&mut |p| names.push(p.name.clone()));
    if optimizer.first.len() != names.len() || optimizer.second.len() != names.len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    put_u64(&mut out, 3 * names.len() as u64);
    model.visit_params(&mut |p| put_tensor(&mut out, &p.name, &p.value));
    for (name, m) in names.iter().zip(&optimizer.first) {
        put_tensor(&mut out, &format!("adam.m.{name}"), m);
    }
    for (name, v) in names.iter().zip(&optimizer.second) {
        put_tensor(&mut out, &format!("adam.v.{name}"), v);
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &HybridModel,
    optimizer: &OptimizerState,
    train: &TrainConfig,
    epochs_done: usize,
) -> Result<()> {
    let bytes = encode_checkpoint(model, optimizer, train, epochs_done)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor2D)> {
        let n = self.len()?;
        let name = String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rows = self.len()?;
        let cols = self.len()?;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let raw = self.take(count)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor2D::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let header_len = cur.len()?;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)?;
    let vocab = Vocabulary::from_tokens(header.vocab.iter().skip(3).cloned());
    if vocab.tokens() != header.vocab.as_slice() {
        return Err(Error::Checkpoint("vocabulary does not start with the reserved tokens".into()));
    }
    let mut model = HybridModel::new(header.model, vocab, 0)?;
    let count = cur.len()?;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = cur.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    let mut optimizer = OptimizerState::new(&model);
    optimizer.step = header.optimizer_step;
    let mut missing = None;
    let mut idx = 0;
    let (first, second) = (&mut optimizer.first, &mut optimizer.second);
    model.visit_params_mut(&mut |p| {
        let parts = (
            tensors.remove(&p.name),
            tensors.remove(&format!("adam.m.{}", p.name)),
            tensors.remove(&format!("adam.v.{}", p.name)),
        );
        match parts {
            (Some(v), Some(m), Some(s)) if v.shape() == p.shape() && m.shape() == p.shape() && s.shape() == p.shape() => {
                p.value = v;
                first[idx] = m;
                second[idx] = s;
            }
            _ => {
                missing.get_or_insert_with(|| p.name.clone());
            }
        }
        idx += 1;
    });
    if let Some(name) = missing {
        return Err(Error::Checkpoint(format!("tensor `{name}` is missing or has the wrong shape")));
    }
    if let Some(extra) = tensors.keys().min() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        train: header.train,
        epochs_done: header.epochs_done,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FusionMode;

    fn small(mode: FusionMode) -> HybridModel {
        let cfg = ModelConfig {
            mode,
            width: 8,
            heads: 2,
            text_depth: 1,
            audio_depth: 1,
            fusion_depth: 1,
            ff_mult: 2,
            frame_width: 4,
            ..ModelConfig::default()
        };
        HybridModel::new(cfg, Vocabulary::build(["a b c"]), 5).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        for mode in FusionMode::ALL {
            let model = small(mode);
            let mut opt = OptimizerState::new(&model);
            opt.step = 7;
            opt.first[0].set(0, 0, 0.25);
            let bytes = encode_checkpoint(&model, &opt, &TrainConfig::default(), 3).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let ck = decode_checkpoint(&bytes).unwrap();
            assert_eq!(ck.epochs_done, 3);
            assert_eq!(ck.optimizer, opt);
            let again = encode_checkpoint(&ck.model, &ck.optimizer, &ck.train, 3).unwrap();
            assert_eq!(bytes, again);
        }
    }

    #[test]
    fn corruption_is_reported() {
        let model = small(FusionMode::Late);
        let opt = OptimizerState::new(&model);
        let bytes = encode_checkpoint(&model, &opt, &TrainConfig::default(), 0).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
    }
}
