//! Small pre-norm transformer encoder producing last-layer hidden states.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const ATTENTION_MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub max_positions: usize,
    /// Token vocabulary size; filled in from the data when zero.
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
            max_positions: 136,
            vocab_size: 0,
            dropout: 0.0,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_positions < 128 {
            return Err(Error::Config(format!(
                "max positions {} below 128",
                self.max_positions
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("token vocabulary size is zero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Parameter layout of the encoder inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerParams>,
    final_ln: (ParamId, ParamId),
}

/// Last-layer hidden states of one sequence plus the blank position.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<T> {
    pub states: Tensor<T>,
    pub blank_index: usize,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn new(states: Tensor<T>, blank_index: usize) -> Result<Self> {
        if states.shape().len() != 2 {
            return Err(Error::shape("hidden_states", states.shape(), &[0, 0]));
        }
        if blank_index >= states.rows() {
            return Err(Error::Index {
                what: "hidden state rows",
                index: blank_index,
                len: states.rows(),
            });
        }
        Ok(HiddenStates { states, blank_index })
    }

    pub fn rows(&self) -> usize {
        self.states.rows()
    }

    pub fn dim(&self) -> usize {
        self.states.cols()
    }

    pub fn blank_row(&self) -> &[T] {
        self.states.row(self.blank_index)
    }
}

fn linear<R: Rng, T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> (ParamId, ParamId) {
    let std = 1.0 / (d_in as f64).sqrt();
    (
        store.init(format!("{name}.weight"), vec![d_in, d_out], Init::Normal(std), true, rng),
        store.init(format!("{name}.bias"), vec![d_out], Init::Zeros, false, rng),
    )
}

fn layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    (
        store.init(format!("{name}.gain"), vec![d], Init::Ones, false, rng),
        store.init(format!("{name}.bias"), vec![d], Init::Zeros, false, rng),
    )
}

/// Optional training-time state for [`Encoder::forward`].
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Encoder {
    /// Registers freshly initialized encoder parameters: scaled-normal
    /// weights, zero biases, unit layer-norm gains.
    pub fn init<T: Scalar>(config: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let emb_std = 1.0 / (d as f64).sqrt();
        let tok_emb = store.init("encoder.tok_emb", vec![config.vocab_size, d], Init::Normal(emb_std), true, rng);
        let pos_emb = store.init("encoder.pos_emb", vec![config.max_positions, d], Init::Normal(emb_std), true, rng);
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("encoder.layer{l}");
                LayerParams {
                    ln1: layer_norm(store, &format!("{p}.ln1"), d, rng),
                    wq: linear(store, &format!("{p}.query"), d, d, rng),
                    wk: linear(store, &format!("{p}.key"), d, d, rng),
                    wv: linear(store, &format!("{p}.value"), d, d, rng),
                    wo: linear(store, &format!("{p}.attn_out"), d, d, rng),
                    ln2: layer_norm(store, &format!("{p}.ln2"), d, rng),
                    ff1: linear(store, &format!("{p}.ffn_in"), d, config.ffn, rng),
                    ff2: linear(store, &format!("{p}.ffn_out"), config.ffn, d, rng),
                }
            })
            .collect();
        let final_ln = layer_norm(store, "encoder.final_ln", d, rng);
        Ok(Encoder {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_ln,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn token_embedding(&self) -> ParamId {
        self.tok_emb
    }

    /// Token embedding rows for `ids`, the input that attribution differentiates.
    pub fn embed_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, vars: &[Var], ids: &[usize]) -> Result<Var> {
        tape.gather(vars[self.tok_emb.0], ids)
    }

    /// Encodes token ids into `[len × hidden]` states.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &[Var],
        ids: &[usize],
        pad: Option<&[bool]>,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Var> {
        if ids.len() > self.config.max_positions {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.config.max_positions,
            });
        }
        let x = self.embed_tokens(tape, vars, ids)?;
        self.forward_embeddings(tape, vars, x, pad, dropout, None)
    }

    /// Encodes precomputed token embedding rows `[len × hidden]`; positions are added here.
    /// When `attention` is given, every layer's per-head attention matrices are pushed to it.
    pub fn forward_embeddings<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &[Var],
        tokens: Var,
        pad: Option<&[bool]>,
        mut dropout: Option<&mut Dropout<'_>>,
        mut attention: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var> {
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 2 || shape[1] != self.config.hidden {
            return Err(Error::shape("encode", &shape, &[0, self.config.hidden]));
        }
        let n = shape[0];
        if n > self.config.max_positions {
            return Err(Error::TooLong {
                len: n,
                max: self.config.max_positions,
            });
        }
        if let Some(p) = pad {
            if p.len() != n {
                return Err(Error::shape("encode pad mask", &[p.len()], &[n]));
            }
        }
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(vars[self.pos_emb.0], &positions)?;
        let mut x = tape.add(tokens, pos)?;
        x = apply_dropout(tape, x, dropout.as_deref_mut())?;

        let key_mask: Option<Vec<bool>> = pad.filter(|p| p.iter().any(|&b| b)).map(|p| {
            (0..n * n).map(|i| p[i % n]).collect()
        });
        let d = self.config.hidden;
        let dh = d / self.config.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let eps = T::lit(LAYER_NORM_EPS);

        for layer in &self.layers {
            let h = tape.layer_norm(x, vars[layer.ln1.0 .0], vars[layer.ln1.1 .0], eps)?;
            let q = affine(tape, vars, h, layer.wq)?;
            let k = affine(tape, vars, h, layer.wk)?;
            let v = affine(tape, vars, h, layer.wv)?;
            let mut heads = Vec::with_capacity(self.config.heads);
            for hd in 0..self.config.heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let kh = tape.slice_cols(k, s, e)?;
                let vh = tape.slice_cols(v, s, e)?;
                let mut scores = tape.matmul_nt(qh, kh)?;
                scores = tape.scale(scores, scale)?;
                if let Some(m) = &key_mask {
                    scores = tape.masked_fill(scores, m, T::lit(ATTENTION_MASK_VALUE))?;
                }
                let probs = tape.softmax(scores)?;
                if let Some(out) = attention.as_deref_mut() {
                    out.push(tape.tensor(probs));
                }
                heads.push(tape.matmul(probs, vh)?);
            }
            let cat = tape.concat(&heads, 1)?;
            let mut o = affine(tape, vars, cat, layer.wo)?;
            o = apply_dropout(tape, o, dropout.as_deref_mut())?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, vars[layer.ln2.0 .0], vars[layer.ln2.1 .0], eps)?;
            let f = affine(tape, vars, h, layer.ff1)?;
            let f = tape.gelu(f)?;
            let mut f = affine(tape, vars, f, layer.ff2)?;
            f = apply_dropout(tape, f, dropout.as_deref_mut())?;
            x = tape.add(x, f)?;
        }
        tape.layer_norm(x, vars[self.final_ln.0 .0], vars[self.final_ln.1 .0], eps)
    }

    /// Forward pass without gradients.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, ids: &[usize], pad: Option<&[bool]>, blank_index: usize) -> Result<HiddenStates<T>> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape)?;
        let out = self.forward(&mut tape, &vars, ids, pad, None)?;
        HiddenStates::new(tape.tensor(out), blank_index)
    }

    /// Attention probability matrices of every layer and head, in that order.
    pub fn attention_maps<T: Scalar>(&self, store: &ParamStore<T>, ids: &[usize], pad: Option<&[bool]>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape)?;
        let x = self.embed_tokens(&mut tape, &vars, ids)?;
        let mut maps = Vec::new();
        self.forward_embeddings(&mut tape, &vars, x, pad, None, Some(&mut maps))?;
        Ok(maps)
    }
}

fn affine<T: Scalar>(tape: &mut Tape<'_, T>, vars: &[Var], x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let y = tape.matmul(x, vars[w.0])?;
    tape.add_bias(y, vars[b.0])
}

fn apply_dropout<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, dropout: Option<&mut Dropout<'_>>) -> Result<Var> {
    let Some(d) = dropout else { return Ok(x) };
    if d.rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - d.rate));
    let mask: Vec<T> = (0..tape.value(x).len())
        .map(|_| if d.rng.random::<f64>() < d.rate { T::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(tape.shape(x).to_vec(), mask)?)?;
    tape.mul(x, m)
}

const BINARY_MAGIC: &[u8; 8] = b"IDMHS001";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HiddenStatesFile {
    rows: usize,
    dim: usize,
    blank_index: usize,
    values: Vec<f64>,
}

impl<T: Scalar> HiddenStates<T> {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&HiddenStatesFile {
            rows: self.rows(),
            dim: self.dim(),
            blank_index: self.blank_index,
            values: self.states.to_f64_vec(),
        })?)
    }

    /// Little-endian binary container: magic, rows, dim, blank index (u64 each), then f64 values.
    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.states.len() * 8);
        out.extend_from_slice(BINARY_MAGIC);
        for v in [self.rows(), self.dim(), self.blank_index] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.states.data() {
            out.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let file = if bytes.starts_with(BINARY_MAGIC) {
            let word = |i: usize| -> Result<u64> {
                let s = bytes
                    .get(8 + i * 8..16 + i * 8)
                    .ok_or_else(|| Error::Format("truncated hidden-state header".into()))?;
                Ok(u64::from_le_bytes(s.try_into().unwrap()))
            };
            let (rows, dim, blank_index) = (word(0)? as usize, word(1)? as usize, word(2)? as usize);
            let body = &bytes[32..];
            if body.len() != rows * dim * 8 {
                return Err(Error::Format(format!(
                    "hidden-state body has {} bytes, expected {}",
                    body.len(),
                    rows * dim * 8
                )));
            }
            let values = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            HiddenStatesFile {
                rows,
                dim,
                blank_index,
                values,
            }
        } else {
            serde_json::from_slice(bytes)?
        };
        if file.values.len() != file.rows * file.dim {
            return Err(Error::Format(format!(
                "{} values for a {}×{} matrix",
                file.values.len(),
                file.rows,
                file.dim
            )));
        }
        let states = Tensor::new(
            vec![file.rows, file.dim],
            file.values.iter().map(|&v| T::lit(v)).collect(),
        )?;
        HiddenStates::new(states, file.blank_index)
    }
}

/// Reads a hidden-state file (binary or JSON, detected from the content) and checks its width.
pub fn import_hidden_states<T: Scalar>(path: &Path, expected_dim: usize) -> Result<HiddenStates<T>> {
    let hs = HiddenStates::from_bytes(&fs::read(path)?)?;
    if hs.dim() != expected_dim {
        return Err(Error::Dimension {
            expected: expected_dim,
            found: hs.dim(),
        });
    }
    Ok(hs)
}

pub fn export_hidden_states<T: Scalar>(hs: &HiddenStates<T>, path: &Path) -> Result<()> {
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        fs::write(path, hs.to_json()?)?;
    } else {
        fs::write(path, hs.to_binary())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(seed: u64) -> (Encoder, ParamStore<f64>) {
        let cfg = EncoderConfig {
            hidden: 16,
            heads: 2,
            ffn: 32,
            vocab_size: 20,
            seed,
            ..EncoderConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::init(&cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn output_has_one_row_per_token() {
        let (enc, store) = setup(1);
        let ids: Vec<usize> = (0..22).map(|i| 6 + i % 14).collect();
        let hs = enc.encode(&store, &ids, None, 3).unwrap();
        assert_eq!(hs.states.shape(), &[22, 16]);
    }

    #[test]
    fn init_is_seeded() {
        let (_, a) = setup(5);
        let (_, b) = setup(5);
        let (_, c) = setup(6);
        assert_eq!(a, b);
        assert_ne!(a, c);
        for e in a.entries() {
            if e.name.ends_with(".gain") {
                assert!(e.tensor.data().iter().all(|&v| v == 1.0));
            }
            if e.name.ends_with(".bias") {
                assert!(e.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_over_real_keys() {
        let (enc, store) = setup(2);
        let ids = [0, 7, 8, 2, 9, 1, 4, 4];
        let pad = [false, false, false, false, false, false, true, true];
        let maps = enc.attention_maps(&store, &ids, Some(&pad)).unwrap();
        assert_eq!(maps.len(), 4);
        for m in &maps {
            for r in 0..8 {
                let row = m.row(r);
                let real: f64 = row[..6].iter().sum();
                assert!((real - 1.0).abs() <= 1e-9);
                assert!(row[6..].iter().all(|&p| p == 0.0));
            }
        }
    }

    #[test]
    fn pad_tail_does_not_change_real_rows() {
        let (enc, store) = setup(3);
        let short = [0usize, 7, 8, 2, 9, 1, 4];
        let long = [0usize, 7, 8, 2, 9, 1, 4, 4, 4, 4];
        let a = enc
            .encode(&store, &short, Some(&[false, false, false, false, false, false, true]), 3)
            .unwrap();
        let b = enc
            .encode(&store, &long, Some(&[false, false, false, false, false, false, true, true, true, true]), 3)
            .unwrap();
        for r in 0..6 {
            for (x, y) in a.states.row(r).iter().zip(b.states.row(r)) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..5 * 64).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![5, 64], data).unwrap()).unwrap();
        let g = tape.constant(Tensor::filled(vec![64], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(vec![64])).unwrap();
        let y = tape.layer_norm(x, g, b, LAYER_NORM_EPS).unwrap();
        for row in tape.value(y).chunks(64) {
            let mean = row.iter().sum::<f64>() / 64.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn over_length_input_is_rejected() {
        let (enc, store) = setup(4);
        let ids = vec![6; 137];
        assert!(matches!(enc.encode(&store, &ids, None, 0), Err(Error::TooLong { .. })));
    }

    #[test]
    fn single_token_change_moves_some_row() {
        let (enc, store) = setup(8);
        let a = enc.encode(&store, &[0, 7, 8, 2, 9, 1], None, 3).unwrap();
        let b = enc.encode(&store, &[0, 7, 10, 2, 9, 1], None, 3).unwrap();
        assert_ne!(a.states, b.states);
        let c = enc.encode(&store, &[0, 7, 8, 2, 9, 1], None, 3).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn hidden_state_files_round_trip() {
        let (enc, store) = setup(9);
        let hs = enc.encode(&store, &[0, 7, 8, 2, 9, 1], None, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["h.json", "h.bin"] {
            let p = dir.path().join(name);
            export_hidden_states(&hs, &p).unwrap();
            let back: HiddenStates<f64> = import_hidden_states(&p, 16).unwrap();
            assert_eq!(back, hs);
            assert!(matches!(
                import_hidden_states::<f64>(&p, 768),
                Err(Error::Dimension { expected: 768, found: 16 })
            ));
        }
    }
}
