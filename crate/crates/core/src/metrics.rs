//! Accuracy and mean reciprocal rank.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClozeExample;
use crate::error::{Error, Result};
use crate::heads::{argmax, rank_of};
use crate::model::ClozeModel;
use crate::scalar::Scalar;

pub fn accuracy(predictions: &[usize], golds: &[usize]) -> Result<f64> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::shape("accuracy", &[predictions.len()], &[golds.len()]));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Mean of `1 / rank` over 1-based ranks.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Config("no ranks to average".into()));
    }
    if let Some(i) = ranks.iter().position(|&r| r == 0) {
        return Err(Error::Index {
            what: "rank (ranks start at 1)",
            index: i,
            len: ranks.len(),
        });
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// What an evaluator needs from a model for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub probs: Vec<f64>,
    /// 1-based rank of the gold idiom in the whole vocabulary.
    pub gold_rank: Option<usize>,
}

pub trait Predictor: Sync {
    fn score(&self, ex: &ClozeExample) -> Result<Scored>;
}

impl<T: Scalar> Predictor for ClozeModel<T> {
    fn score(&self, ex: &ClozeExample) -> Result<Scored> {
        let p = self.predict(ex)?;
        Ok(Scored {
            probs: p.distribution.probs.iter().map(|x| x.to_f64_lossless()).collect(),
            gold_rank: p.vocab_scores.map(|s| rank_of(&s, ex.gold_idiom())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    pub predicted: usize,
    pub gold: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub accuracy: f64,
    /// Only for heads with idiom embeddings.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mrr: Option<f64>,
    pub count: usize,
    pub records: Vec<ExampleRecord>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8}", "split", "count", "acc", "mrr");
        let mrr = self.mrr.map_or_else(|| "-".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(s, "{:<10} {:>8} {:>8.4} {:>8}", self.split, self.count, self.accuracy, mrr);
        s
    }
}

/// Scores every example in parallel; records keep dataset order.
pub fn evaluate<P: Predictor + ?Sized>(predictor: &P, examples: &[ClozeExample], split: &str) -> Result<EvalReport> {
    let scored = examples
        .par_iter()
        .map(|ex| predictor.score(ex))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<ExampleRecord> = examples
        .iter()
        .zip(&scored)
        .map(|(ex, s)| ExampleRecord {
            id: ex.id.clone(),
            predicted: argmax(&s.probs),
            gold: ex.gold,
            rank: s.gold_rank,
        })
        .collect();
    let predicted: Vec<usize> = records.iter().map(|r| r.predicted).collect();
    let golds: Vec<usize> = records.iter().map(|r| r.gold).collect();
    let ranks: Option<Vec<usize>> = records.iter().map(|r| r.rank).collect();
    if ranks.is_none() && records.iter().any(|r| r.rank.is_some()) {
        return Err(Error::Config("vocabulary ranks available for only some examples".into()));
    }
    Ok(EvalReport {
        split: split.to_string(),
        accuracy: accuracy(&predicted, &golds)?,
        mrr: ranks.map(|r| mrr(&r)).transpose()?,
        count: records.len(),
        records,
    })
}
