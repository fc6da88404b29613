//! Encoder plus scoring head, bound to token and idiom vocabularies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClozeExample, IdiomId, IdiomVocabulary, TokenVocabulary, DEFAULT_MAX_LEN, IDIOM_CHARS, SEP_ID};
use crate::encoder::{Dropout, Encoder, EncoderConfig, HiddenStates};
use crate::error::{Error, Result};
use crate::heads::{self, CandidateDistribution, CandidateSet, HeadVariant, Scorer};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadVariant,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

impl ModelConfig {
    pub fn new(head: HeadVariant) -> Self {
        ModelConfig {
            head,
            max_len: DEFAULT_MAX_LEN,
            encoder: EncoderConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.max_len > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "window length {} exceeds {} encoder positions",
                self.max_len, self.encoder.max_positions
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum HeadParams {
    CharSeq { w: ParamId, b: ParamId },
    IdiomEmb { table: ParamId, w: ParamId, b: ParamId },
    Pool { table: ParamId },
    Dual { local: ParamId, global: ParamId },
}

/// Logit variables of one example on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Logits {
    /// One logit per candidate.
    pub candidates: Var,
    /// One logit per vocabulary idiom, when requested.
    pub enlarged: Option<Var>,
}

/// Value-level output for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub distribution: CandidateDistribution<T>,
    /// Enlarged-set logits over the whole vocabulary (embedding heads only).
    pub vocab_scores: Option<Vec<T>>,
}

/// Token ids of one windowed example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prepared {
    pub ids: Vec<usize>,
    pub blank_index: usize,
}

#[derive(Clone, Debug)]
pub struct ClozeModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Encoder,
    head: HeadParams,
    tokens: TokenVocabulary,
    idioms: IdiomVocabulary,
}

impl<T: Scalar> ClozeModel<T> {
    /// Fresh model; the encoder's token table is sized to `tokens`.
    pub fn new(mut config: ModelConfig, tokens: TokenVocabulary, idioms: IdiomVocabulary) -> Result<Self> {
        config.encoder.vocab_size = tokens.len();
        config.validate()?;
        if idioms.is_empty() {
            return Err(Error::Config("empty idiom vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::init(&config.encoder, &mut params, &mut rng)?;
        let d = config.encoder.hidden;
        let v = idioms.len();
        let std = Init::Normal(1.0 / (d as f64).sqrt());
        let mut table = |name: &str, params: &mut ParamStore<T>| params.init(name, vec![v, d], std, true, &mut rng);
        let head = match config.head {
            HeadVariant::CharSeq => HeadParams::CharSeq {
                w: params.init("head.cls.weight", vec![d], std, true, &mut ChaCha8Rng::seed_from_u64(config.encoder.seed ^ 1)),
                b: params.add("head.cls.bias", Tensor::zeros(vec![1]), false),
            },
            HeadVariant::IdiomEmb | HeadVariant::IdiomEmbEc => {
                let t = table("head.idiom_emb", &mut params);
                HeadParams::IdiomEmb {
                    table: t,
                    w: params.add("head.match.weight", Tensor::filled(vec![d], T::one()), true),
                    b: params.add("head.match.bias", Tensor::zeros(vec![1]), false),
                }
            }
            HeadVariant::ContextPool => HeadParams::Pool {
                table: table("head.idiom_emb", &mut params),
            },
            HeadVariant::Dual => {
                let local = table("head.idiom_local", &mut params);
                let global = table("head.idiom_global", &mut params);
                HeadParams::Dual { local, global }
            }
        };
        Ok(ClozeModel {
            config,
            params,
            encoder,
            head,
            tokens,
            idioms,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> HeadVariant {
        self.config.head
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn tokens(&self) -> &TokenVocabulary {
        &self.tokens
    }

    pub fn idioms(&self) -> &IdiomVocabulary {
        &self.idioms
    }

    pub fn hidden(&self) -> usize {
        self.config.encoder.hidden
    }

    pub fn prepare(&self, ex: &ClozeExample) -> Result<Prepared> {
        let w = ex.window(self.config.max_len)?;
        for &c in &ex.candidates {
            if !self.idioms.contains(c) {
                return Err(Error::Index {
                    what: "idiom vocabulary",
                    index: c.0,
                    len: self.idioms.len(),
                });
            }
        }
        Ok(Prepared {
            ids: self.tokens.ids(&w.symbols),
            blank_index: w.blank_index,
        })
    }

    /// `window + idiom characters + SEP`, the input of one character-sequence pass.
    pub fn charseq_input(&self, prepared: &Prepared, idiom: IdiomId) -> Result<Vec<usize>> {
        let mut ids = prepared.ids.clone();
        let chars: Vec<_> = self.idioms.chars(idiom).collect();
        debug_assert_eq!(chars.len(), IDIOM_CHARS);
        ids.extend(chars.into_iter().map(|c| self.tokens.id(crate::corpus::Symbol::Char(c))));
        ids.push(SEP_ID);
        if ids.len() > self.config.encoder.max_positions {
            return Err(Error::TooLong {
                len: ids.len(),
                max: self.config.encoder.max_positions,
            });
        }
        Ok(ids)
    }

    /// Records the forward pass of `ex` on `tape`; `vars` comes from binding this model's parameters.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &[Var],
        ex: &ClozeExample,
        enlarged: bool,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Logits> {
        let prepared = self.prepare(ex)?;
        if let HeadParams::CharSeq { w, b } = self.head {
            if enlarged {
                return Err(Error::Config("the charseq head has no enlarged candidate set".into()));
            }
            let mut scores = Vec::with_capacity(ex.candidates.len());
            for &c in &ex.candidates {
                let ids = self.charseq_input(&prepared, c)?;
                let states = self.encoder.forward(tape, vars, &ids, None, dropout.as_deref_mut())?;
                scores.push(self.charseq_score(tape, vars, states, w, b)?);
            }
            let candidates = tape.concat(&scores, 0)?;
            return Ok(Logits { candidates, enlarged: None });
        }
        let states = self.encoder.forward(tape, vars, &prepared.ids, None, dropout)?;
        self.head_logits(tape, vars, states, prepared.blank_index, &ex.candidates, enlarged)
    }

    fn charseq_score(&self, tape: &mut Tape<'_, T>, vars: &[Var], states: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let cls = tape.row(states, 0)?;
        let s = tape.dot(cls, vars[w.0])?;
        let s = tape.reshape(s, vec![1])?;
        tape.add(s, vars[b.0])
    }

    /// Head logits from last-layer states already on the tape.
    pub fn head_logits(
        &self,
        tape: &mut Tape<'_, T>,
        vars: &[Var],
        states: Var,
        blank_index: usize,
        candidates: &[IdiomId],
        enlarged: bool,
    ) -> Result<Logits> {
        let h_b = tape.row(states, blank_index)?;
        let (cand, enl) = match self.head {
            HeadParams::CharSeq { .. } => {
                return Err(Error::Config("the charseq head needs one encoder pass per candidate".into()))
            }
            HeadParams::IdiomEmb { table, w, b } => {
                let c = heads::idm_logits(tape, h_b, vars[table.0], candidates, vars[w.0], vars[b.0])?;
                let e = enlarged.then(|| heads::enlarged_logits(tape, h_b, vars[table.0])).transpose()?;
                (c, e)
            }
            HeadParams::Pool { table } => {
                let c = heads::context_pool_logits(tape, states, blank_index, vars[table.0], candidates, None)?;
                let e = enlarged.then(|| heads::enlarged_logits(tape, h_b, vars[table.0])).transpose()?;
                (c, e)
            }
            HeadParams::Dual { local, global } => {
                let c = heads::dual_logits(tape, states, blank_index, vars[local.0], vars[global.0], candidates, None)?;
                let e = enlarged
                    .then(|| heads::dual_enlarged_logits(tape, h_b, vars[local.0], vars[global.0]))
                    .transpose()?;
                (c, e)
            }
        };
        Ok(Logits {
            candidates: cand,
            enlarged: enl,
        })
    }

    fn scorer(&self) -> Scorer {
        match self.config.head {
            HeadVariant::CharSeq => Scorer::CharSeq,
            HeadVariant::IdiomEmb | HeadVariant::IdiomEmbEc => Scorer::IdiomEmb,
            HeadVariant::ContextPool => Scorer::ContextPool,
            HeadVariant::Dual => Scorer::Dual,
        }
    }

    fn finish(&self, tape: &mut Tape<'_, T>, logits: Logits) -> Result<Prediction<T>> {
        let p = tape.softmax(logits.candidates)?;
        Ok(Prediction {
            distribution: CandidateDistribution {
                probs: tape.value(p).to_vec(),
                scorer: self.scorer(),
                set: CandidateSet::Original,
            },
            vocab_scores: logits.enlarged.map(|e| tape.value(e).to_vec()),
        })
    }

    /// Candidate distribution, plus vocabulary scores for embedding heads.
    pub fn predict(&self, ex: &ClozeExample) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape)?;
        let logits = self.forward(&mut tape, &vars, ex, self.head().has_idiom_embeddings(), None)?;
        self.finish(&mut tape, logits)
    }

    /// Last-layer states of the example's window.
    pub fn encode(&self, ex: &ClozeExample) -> Result<HiddenStates<T>> {
        let prepared = self.prepare(ex)?;
        self.encoder.encode(&self.params, &prepared.ids, None, prepared.blank_index)
    }

    /// Scores candidates against externally produced hidden states.
    pub fn predict_from_states(&self, states: &HiddenStates<T>, candidates: &[IdiomId]) -> Result<Prediction<T>> {
        if states.dim() != self.hidden() {
            return Err(Error::Dimension {
                expected: self.hidden(),
                found: states.dim(),
            });
        }
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape)?;
        let s = tape.borrowed(&states.states)?;
        let logits = self.head_logits(&mut tape, &vars, s, states.blank_index, candidates, true)?;
        self.finish(&mut tape, logits)
    }

    /// Replaces parameter values by name; every parameter must be supplied exactly once.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Vec<usize>, Vec<T>)>) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(Error::Format(format!(
                "{} tensors supplied for {} parameters",
                tensors.len(),
                self.params.len()
            )));
        }
        for (name, shape, data) in tensors {
            self.params.set(&name, &shape, data)?;
        }
        Ok(())
    }
}
