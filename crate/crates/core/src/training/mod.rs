//! Loss assembly, schedule, optimizer and the training loop.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use optim::{clip_global_norm, AdamW};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClozeExample;
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::heads::HeadVariant;
use crate::model::ClozeModel;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    pub seed: u64,
    /// Enlarged-candidate loss term; `None` takes the head's default.
    pub ec: Option<bool>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small-model defaults for CPU runs.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            warmup: 100,
            epochs: 20,
            batch_size: 32,
            weight_decay: 0.01,
            clip: 1.0,
            seed: 42,
            ec: None,
        }
    }

    /// Fine-tuning values used with a pretrained encoder on the full dataset.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 5e-5,
            warmup: 1000,
            epochs: 5,
            batch_size: 40,
            ..TrainConfig::desk()
        }
    }

    pub fn ec_for(&self, head: HeadVariant) -> Result<bool> {
        let ec = self.ec.unwrap_or_else(|| head.default_ec());
        if ec && !head.has_idiom_embeddings() {
            return Err(Error::Config("the charseq head cannot train with the enlarged candidate set".into()));
        }
        Ok(ec)
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size.max(1))
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.epochs * self.steps_per_epoch(examples)
    }

    pub fn validate(&self, examples: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if examples == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} is not positive", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0 && self.clip > 0.0) {
            return Err(Error::Config("weight decay must be non-negative and clip positive".into()));
        }
        let total = self.total_steps(examples);
        if self.warmup >= total {
            return Err(Error::Config(format!("warmup {} is not below {} total steps", self.warmup, total)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        lr_at(step, self.warmup, total, self.lr)
    }
}

/// Linear warmup from 0 to `lr_max` over `warmup` steps, then linear decay to 0 at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, lr_max: f64) -> f64 {
    if step < warmup {
        return lr_max * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    lr_max * (total - step) as f64 / (total - warmup) as f64
}

/// Negative log-likelihood terms summed over a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub candidate_nll: f64,
    /// Present when the enlarged-candidate term is on.
    pub enlarged_nll: Option<f64>,
    pub total: f64,
    /// Some probability fell below the floor.
    pub clamped: bool,
}

impl LossReport {
    /// Loss from gold probabilities `(p*, q*)`; `q*` is `None` when the enlarged term is off.
    pub fn from_probabilities(terms: &[(f64, Option<f64>)]) -> Self {
        let mut r = LossReport::default();
        for &(p, q) in terms {
            r.add_term(p, q);
        }
        r
    }

    fn add_term(&mut self, p: f64, q: Option<f64>) {
        let nll = |x: f64| -x.max(PROB_FLOOR).ln();
        self.clamped |= p < PROB_FLOOR || q.is_some_and(|q| q < PROB_FLOOR);
        self.candidate_nll += nll(p);
        if let Some(q) = q {
            *self.enlarged_nll.get_or_insert(0.0) += nll(q);
        }
        self.total = self.candidate_nll + self.enlarged_nll.unwrap_or(0.0);
    }

    fn merge(&mut self, other: &LossReport) {
        self.candidate_nll += other.candidate_nll;
        if let Some(e) = other.enlarged_nll {
            *self.enlarged_nll.get_or_insert(0.0) += e;
        }
        self.clamped |= other.clamped;
        self.total = self.candidate_nll + self.enlarged_nll.unwrap_or(0.0);
    }
}

/// Records one example's loss on `tape`, returning the scalar loss variable.
pub fn example_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &[Var],
    model: &ClozeModel<T>,
    ex: &ClozeExample,
    ec: bool,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, LossReport)> {
    let logits = model.forward(tape, vars, ex, ec, dropout)?;
    let floor = T::lit(PROB_FLOOR);
    let p = tape.softmax(logits.candidates)?;
    let p_star = tape.select(p, ex.gold)?;
    let mut report = LossReport::default();
    let q_star = match logits.enlarged {
        Some(e) => {
            let q = tape.softmax(e)?;
            Some(tape.select(q, ex.gold_idiom().0)?)
        }
        None => None,
    };
    report.add_term(
        tape.scalar(p_star).to_f64_lossless(),
        q_star.map(|q| tape.scalar(q).to_f64_lossless()),
    );
    let lp = tape.log(p_star, floor)?;
    let mut loss = tape.scale(lp, -T::one())?;
    if let Some(q) = q_star {
        let lq = tape.log(q, floor)?;
        let nq = tape.scale(lq, -T::one())?;
        loss = tape.add(loss, nq)?;
    }
    Ok((loss, report))
}

/// Batch loss without gradients.
pub fn compute_loss<T: Scalar>(batch: &[ClozeExample], model: &ClozeModel<T>, ec: bool) -> Result<LossReport> {
    let reports = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape)?;
            Ok(example_loss(&mut tape, &vars, model, ex, ec, None)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = LossReport::default();
    reports.iter().for_each(|r| total.merge(r));
    Ok(total)
}

/// Summed batch loss and its gradient, one dense vector per parameter.
///
/// Examples are processed in parallel and reduced in batch order, so the
/// result does not depend on the thread count.
pub fn batch_gradients<T: Scalar>(
    batch: &[&ClozeExample],
    model: &ClozeModel<T>,
    ec: bool,
    dropout_seed: Option<u64>,
) -> Result<(LossReport, Vec<Vec<T>>)> {
    let rate = model.config().encoder.dropout;
    let per_example = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut tape = Tape::new();
            let vars = model.params().bind(&mut tape)?;
            let mut rng = dropout_seed.map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                r.set_stream(i as u64);
                r
            });
            let mut dropout = match rng.as_mut() {
                Some(rng) if rate > 0.0 => Some(Dropout { rate, rng }),
                _ => None,
            };
            let (loss, report) = example_loss(&mut tape, &vars, model, ex, ec, dropout.as_mut())?;
            let grads = tape.backward(loss)?;
            let sparse: Vec<(usize, Vec<T>)> = grads.params().map(|(p, g)| (p, g.to_vec())).collect();
            Ok((report, sparse))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut grads: Vec<Vec<T>> = model.params().entries().iter().map(|e| vec![T::zero(); e.tensor.len()]).collect();
    let mut report = LossReport::default();
    for (r, sparse) in &per_example {
        report.merge(r);
        for (p, g) in sparse {
            grads[*p].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
    Ok((report, grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub grad_norm: f64,
}

/// Model, optimizer state and step counter of a training run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ClozeModel<T>,
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    /// Completed optimizer steps.
    pub step: usize,
    pub log: Vec<StepLog>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: ClozeModel<T>, config: TrainConfig) -> Result<Self> {
        config.ec_for(model.head())?;
        let optimizer = AdamW::new(model.params(), config.weight_decay);
        Ok(Trainer {
            model,
            config,
            optimizer,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn ec(&self) -> bool {
        self.config.ec_for(self.model.head()).expect("checked at construction")
    }

    /// Example order of `epoch`, a seeded shuffle independent of earlier epochs.
    pub fn epoch_order(&self, examples: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..examples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        order
    }

    /// Trains until the configured number of steps, or until `stop_at` completed steps.
    pub fn fit(&mut self, data: &[ClozeExample], stop_at: Option<usize>) -> Result<()> {
        self.config.validate(data.len())?;
        let total = self.config.total_steps(data.len());
        let per_epoch = self.config.steps_per_epoch(data.len());
        let end = stop_at.map_or(total, |s| s.min(total));
        let mut order: Option<(usize, Vec<usize>)> = None;
        while self.step < end {
            let epoch = self.step / per_epoch;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, self.epoch_order(data.len(), epoch)));
            }
            let idx = &order.as_ref().expect("set above").1;
            let start = (self.step % per_epoch) * self.config.batch_size;
            let batch: Vec<&ClozeExample> = idx[start..(start + self.config.batch_size).min(data.len())]
                .iter()
                .map(|&i| &data[i])
                .collect();
            let lr = self.config.lr_at(self.step + 1, total);
            let entry = self.train_step(&batch, lr)?;
            log::debug!(
                "step {} epoch {} lr {:.3e} loss {:.4} norm {:.3}",
                entry.step,
                entry.epoch,
                entry.lr,
                entry.loss.total,
                entry.grad_norm
            );
            self.log.push(StepLog { epoch, ..entry });
        }
        Ok(())
    }

    /// One clipped AdamW update on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&ClozeExample], lr: f64) -> Result<StepLog> {
        let ec = self.ec();
        let seed = self.config.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let dropout_seed = (self.model.config().encoder.dropout > 0.0).then_some(seed);
        let ids = || batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(",");
        let (report, mut grads) = batch_gradients(batch, &self.model, ec, dropout_seed).map_err(|e| match e {
            Error::Numerical { op, detail } => Error::Numerical {
                op,
                detail: format!("{detail}; batch ids [{}]", ids()),
            },
            other => other,
        })?;
        if !report.total.is_finite() {
            return Err(Error::numerical("loss", format!("{}; batch ids [{}]", report.total, ids())));
        }
        let grad_norm = clip_global_norm(&mut grads, T::lit(self.config.clip)).to_f64_lossless();
        self.optimizer.step(self.model.params_mut(), &grads, T::lit(lr))?;
        self.step += 1;
        Ok(StepLog {
            step: self.step,
            epoch: 0,
            lr,
            loss: report,
            grad_norm,
        })
    }
}
