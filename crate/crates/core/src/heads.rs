//! Scoring heads mapping hidden states and idiom embeddings to candidate
//! probabilities.
//!
//! Each head exists as a tape-level builder (`*_logits`), used for training,
//! and as a value-level function (`score_*`) that evaluates the same builder
//! on a throwaway tape.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::IdiomId;
use crate::encoder::HiddenStates;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// The five model variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadVariant {
    /// Idiom as a character sequence appended to the passage, scored from CLS.
    #[serde(rename = "charseq")]
    CharSeq,
    /// Idiom embedding fused with the blank state, no enlarged candidate set.
    #[serde(rename = "idm")]
    IdiomEmb,
    /// Idiom embedding with the enlarged candidate set.
    #[serde(rename = "idm-ec")]
    IdiomEmbEc,
    /// Context-aware pooling (with the enlarged candidate set).
    #[serde(rename = "cp")]
    ContextPool,
    /// Context-aware pooling with dual embeddings (with the enlarged candidate set).
    #[serde(rename = "cp-de")]
    Dual,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::CharSeq,
        HeadVariant::IdiomEmb,
        HeadVariant::IdiomEmbEc,
        HeadVariant::ContextPool,
        HeadVariant::Dual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::CharSeq => "charseq",
            HeadVariant::IdiomEmb => "idm",
            HeadVariant::IdiomEmbEc => "idm-ec",
            HeadVariant::ContextPool => "cp",
            HeadVariant::Dual => "cp-de",
        }
    }

    /// Whether the enlarged-candidate loss term is on by default.
    pub fn default_ec(self) -> bool {
        matches!(self, HeadVariant::IdiomEmbEc | HeadVariant::ContextPool | HeadVariant::Dual)
    }

    /// Whether the head learns idiom embeddings (and therefore supports MRR).
    pub fn has_idiom_embeddings(self) -> bool {
        self != HeadVariant::CharSeq
    }

    pub fn is_dual(self) -> bool {
        self == HeadVariant::Dual
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadVariant::ALL
            .into_iter()
            .find(|h| h.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown head {s:?}; expected one of charseq, idm, idm-ec, cp, cp-de")))
    }
}

/// Which formula produced a distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    CharSeq,
    IdiomEmb,
    Enlarged,
    ContextPool,
    Dual,
    DualEnlarged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSet {
    /// The example's own candidate list.
    Original,
    /// The whole idiom vocabulary.
    Enlarged,
}

/// Probabilities over an ordered candidate list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDistribution<T> {
    pub probs: Vec<T>,
    pub scorer: Scorer,
    pub set: CandidateSet,
}

impl<T: Scalar> CandidateDistribution<T> {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the most probable candidate; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Two same-shape tables: `local` rows match the blank state, `global` rows
/// match the pooled passage.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEmbeddingTable<T> {
    pub local: Tensor<T>,
    pub global: Tensor<T>,
}

impl<T: Scalar> DualEmbeddingTable<T> {
    pub fn new(local: Tensor<T>, global: Tensor<T>) -> Result<Self> {
        if local.shape() != global.shape() || local.shape().len() != 2 {
            return Err(Error::shape("dual_table", local.shape(), global.shape()));
        }
        Ok(DualEmbeddingTable { local, global })
    }
}

fn ids(candidates: &[IdiomId]) -> Vec<usize> {
    candidates.iter().map(|c| c.0).collect()
}

fn non_empty(candidates: &[IdiomId]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Config("empty candidate list".into()));
    }
    Ok(())
}

/// `w · (a_k ⊙ h_b) + b` for each candidate.
pub fn idm_logits<T: Scalar>(
    tape: &mut Tape<'_, T>,
    blank: Var,
    table: Var,
    candidates: &[IdiomId],
    w: Var,
    b: Var,
) -> Result<Var> {
    non_empty(candidates)?;
    let a = tape.gather(table, &ids(candidates))?;
    let fused = tape.mul_row(a, blank)?;
    let s = tape.matmul(fused, w)?;
    tape.add_bias(s, b)
}

/// `a · h_b` for every idiom in the table.
pub fn enlarged_logits<T: Scalar>(tape: &mut Tape<'_, T>, blank: Var, table: Var) -> Result<Var> {
    if tape.shape(table).first() == Some(&0) {
        return Err(Error::Config("empty idiom vocabulary".into()));
    }
    tape.matmul(table, blank)
}

/// `max_i a_k · h_i` over non-pad rows, one value per candidate row of `emb`.
pub fn pooled_match<T: Scalar>(tape: &mut Tape<'_, T>, states: Var, emb: Var, pad: Option<&[bool]>) -> Result<Var> {
    let mut scores = tape.matmul_nt(states, emb)?;
    if let Some(p) = pad.filter(|p| p.iter().any(|&b| b)) {
        let k = tape.shape(emb)[0];
        if p.iter().all(|&b| b) {
            return Err(Error::Config("pooling over an all-pad sequence".into()));
        }
        let mask: Vec<bool> = p.iter().flat_map(|&b| std::iter::repeat_n(b, k)).collect();
        scores = tape.masked_fill(scores, &mask, T::lit(-1e30))?;
    }
    tape.max_axis(scores, 0)
}

fn blank_row<T: Scalar>(tape: &mut Tape<'_, T>, states: Var, blank_index: usize) -> Result<Var> {
    let rows = tape.shape(states)[0];
    if blank_index >= rows {
        return Err(Error::Index {
            what: "hidden state rows",
            index: blank_index,
            len: rows,
        });
    }
    tape.row(states, blank_index)
}

/// `a_k · h_b + max_i (a_k · h_i)` for each candidate.
pub fn context_pool_logits<T: Scalar>(
    tape: &mut Tape<'_, T>,
    states: Var,
    blank_index: usize,
    table: Var,
    candidates: &[IdiomId],
    pad: Option<&[bool]>,
) -> Result<Var> {
    dual_logits(tape, states, blank_index, table, table, candidates, pad)
}

/// `a^u_k · h_b + max_i (a^v_k · h_i)` for each candidate.
pub fn dual_logits<T: Scalar>(
    tape: &mut Tape<'_, T>,
    states: Var,
    blank_index: usize,
    local: Var,
    global: Var,
    candidates: &[IdiomId],
    pad: Option<&[bool]>,
) -> Result<Var> {
    non_empty(candidates)?;
    let h_b = blank_row(tape, states, blank_index)?;
    let cand = ids(candidates);
    let u = tape.gather(local, &cand)?;
    let v = if local == global { u } else { tape.gather(global, &cand)? };
    let near = tape.matmul(u, h_b)?;
    let far = pooled_match(tape, states, v, pad)?;
    tape.add(near, far)
}

/// `a^u · h_b + a^v · h_b` for every idiom.
pub fn dual_enlarged_logits<T: Scalar>(tape: &mut Tape<'_, T>, blank: Var, local: Var, global: Var) -> Result<Var> {
    let u = enlarged_logits(tape, blank, local)?;
    let v = enlarged_logits(tape, blank, global)?;
    tape.add(u, v)
}

fn distribution<T: Scalar>(tape: &mut Tape<'_, T>, logits: Var, scorer: Scorer, set: CandidateSet) -> Result<CandidateDistribution<T>> {
    let p = tape.softmax(logits)?;
    Ok(CandidateDistribution {
        probs: tape.value(p).to_vec(),
        scorer,
        set,
    })
}

fn vector<'a, T: Scalar>(tape: &mut Tape<'a, T>, v: &[T]) -> Result<Var> {
    tape.constant(Tensor::vector(v.to_vec()))
}

/// Candidate distribution from the blank state with a fused-product match.
pub fn score_idm_emb<T: Scalar>(
    h_b: &[T],
    candidates: &[IdiomId],
    table: &Tensor<T>,
    w: &[T],
    b: T,
) -> Result<CandidateDistribution<T>> {
    let mut tape = Tape::new();
    let hv = vector(&mut tape, h_b)?;
    let tv = tape.borrowed(table)?;
    let wv = vector(&mut tape, w)?;
    let bv = vector(&mut tape, &[b])?;
    let logits = idm_logits(&mut tape, hv, tv, candidates, wv, bv)?;
    distribution(&mut tape, logits, Scorer::IdiomEmb, CandidateSet::Original)
}

/// Distribution over the whole vocabulary from `a · h_b`.
pub fn score_enlarged<T: Scalar>(h_b: &[T], table: &Tensor<T>) -> Result<CandidateDistribution<T>> {
    let mut tape = Tape::new();
    let hv = vector(&mut tape, h_b)?;
    let tv = tape.borrowed(table)?;
    let logits = enlarged_logits(&mut tape, hv, tv)?;
    distribution(&mut tape, logits, Scorer::Enlarged, CandidateSet::Enlarged)
}

/// Candidate distribution with context-aware pooling over all rows of `states`.
pub fn score_context_pool<T: Scalar>(
    states: &HiddenStates<T>,
    candidates: &[IdiomId],
    table: &Tensor<T>,
) -> Result<CandidateDistribution<T>> {
    let mut tape = Tape::new();
    let sv = tape.borrowed(&states.states)?;
    let tv = tape.borrowed(table)?;
    let logits = context_pool_logits(&mut tape, sv, states.blank_index, tv, candidates, None)?;
    distribution(&mut tape, logits, Scorer::ContextPool, CandidateSet::Original)
}

/// Candidate distribution with context-aware pooling and dual embeddings.
pub fn score_dual<T: Scalar>(
    states: &HiddenStates<T>,
    candidates: &[IdiomId],
    table: &DualEmbeddingTable<T>,
) -> Result<CandidateDistribution<T>> {
    let mut tape = Tape::new();
    let sv = tape.borrowed(&states.states)?;
    let u = tape.borrowed(&table.local)?;
    let v = tape.borrowed(&table.global)?;
    let logits = dual_logits(&mut tape, sv, states.blank_index, u, v, candidates, None)?;
    distribution(&mut tape, logits, Scorer::Dual, CandidateSet::Original)
}

/// Distribution over the whole vocabulary matching both dual rows against `h_b` only.
pub fn score_dual_enlarged<T: Scalar>(h_b: &[T], table: &DualEmbeddingTable<T>) -> Result<CandidateDistribution<T>> {
    let mut tape = Tape::new();
    let hv = vector(&mut tape, h_b)?;
    let u = tape.borrowed(&table.local)?;
    let v = tape.borrowed(&table.global)?;
    let logits = dual_enlarged_logits(&mut tape, hv, u, v)?;
    distribution(&mut tape, logits, Scorer::DualEnlarged, CandidateSet::Enlarged)
}

/// Full ranking of the vocabulary by descending score, ties to the lower id.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabularyRanking {
    order: Vec<IdiomId>,
    ranks: Vec<usize>,
}

impl VocabularyRanking {
    pub fn from_scores<T: Scalar>(scores: &[T]) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut ranks = vec![0; scores.len()];
        for (pos, &id) in order.iter().enumerate() {
            ranks[id] = pos + 1;
        }
        VocabularyRanking {
            order: order.into_iter().map(IdiomId).collect(),
            ranks,
        }
    }

    /// 1-based rank of `id`.
    pub fn rank(&self, id: IdiomId) -> usize {
        self.ranks[id.0]
    }

    pub fn order(&self) -> &[IdiomId] {
        &self.order
    }
}

/// 1-based rank of `id` under the same ordering as [`VocabularyRanking`], without sorting.
pub fn rank_of<T: Scalar>(scores: &[T], id: IdiomId) -> usize {
    let s = scores[id.0];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < id.0))
        .count()
}

/// Ranks the vocabulary for the blank of `states`, with enlarged-set scores
/// (`a · h_b` for a single table, `(a^u + a^v) · h_b` for a dual one).
pub fn rank_vocabulary<T: Scalar>(h_b: &[T], table: VocabTable<'_, T>) -> Result<VocabularyRanking> {
    let mut tape = Tape::new();
    let hv = vector(&mut tape, h_b)?;
    let logits = match table {
        VocabTable::Single(t) => {
            let tv = tape.borrowed(t)?;
            enlarged_logits(&mut tape, hv, tv)?
        }
        VocabTable::Dual(d) => {
            let u = tape.borrowed(&d.local)?;
            let v = tape.borrowed(&d.global)?;
            dual_enlarged_logits(&mut tape, hv, u, v)?
        }
    };
    Ok(VocabularyRanking::from_scores(tape.value(logits)))
}

#[derive(Clone, Copy, Debug)]
pub enum VocabTable<'a, T> {
    Single(&'a Tensor<T>),
    Dual(&'a DualEmbeddingTable<T>),
}
