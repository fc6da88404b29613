//! Binary checkpoint: magic, little-endian header length, JSON header, then
//! every parameter followed by the two Adam moment buffers as f64 LE values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, TrainConfig, Trainer};
use crate::corpus::{IdiomVocabulary, TokenVocabulary};
use crate::error::{Error, Result};
use crate::model::{ClozeModel, ModelConfig};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IDMCKPT1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    scalar_bytes: usize,
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    adam_t: u64,
    tokens: TokenVocabulary,
    idioms: IdiomVocabulary,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let params = trainer.model.params();
    let header = Header {
        scalar_bytes: std::mem::size_of::<T>(),
        model: trainer.model.config().clone(),
        train: trainer.config.clone(),
        step: trainer.step,
        adam_t: trainer.optimizer.t,
        tokens: trainer.model.tokens().clone(),
        idioms: trainer.model.idioms().clone(),
        tensors: params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 24 * params.scalar_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let values = params
        .entries()
        .iter()
        .flat_map(|e| e.tensor.data().iter())
        .chain(trainer.optimizer.m.iter().flatten())
        .chain(trainer.optimizer.v.iter().flatten());
    for x in values {
        out.extend_from_slice(&x.to_f64_lossless().to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Trainer<T>> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.scalar_bytes != std::mem::size_of::<T>() {
        return Err(bad(&format!(
            "stored with {}-byte scalars, loading as {}-byte",
            header.scalar_bytes,
            std::mem::size_of::<T>()
        )));
    }
    let mut values = bytes[16 + hlen..]
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
    let mut take = |n: usize| -> Result<Vec<T>> {
        let v: Vec<T> = values.by_ref().take(n).collect();
        if v.len() != n {
            return Err(bad("truncated data"));
        }
        Ok(v)
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (name, shape) in &header.tensors {
        let n = shape.iter().product();
        tensors.push((name.clone(), shape.clone(), take(n)?));
    }
    let sizes: Vec<usize> = tensors.iter().map(|t| t.2.len()).collect();
    let m = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
    let v = sizes.iter().map(|&n| take(n)).collect::<Result<Vec<_>>>()?;
    if (bytes.len() - 16 - hlen) != 24 * sizes.iter().sum::<usize>() {
        return Err(bad("trailing data"));
    }

    let mut model = ClozeModel::new(header.model, header.tokens, header.idioms)?;
    model.load_tensors(tensors)?;
    let mut optimizer = AdamW::new(model.params(), header.train.weight_decay);
    optimizer.t = header.adam_t;
    optimizer.m = m;
    optimizer.v = v;
    let mut trainer = Trainer::new(model, header.train)?;
    trainer.optimizer = optimizer;
    trainer.step = header.step;
    Ok(trainer)
}
