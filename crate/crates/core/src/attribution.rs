//! Integrated Gradients over input token embeddings, merged to words for display.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClozeExample, Symbol, CLS_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::heads::HeadVariant;
use crate::model::ClozeModel;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_STEPS: usize = 50;

/// Path-integrated gradients of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegratedGradients<T> {
    /// Same shape as the input.
    pub attributions: Tensor<T>,
    pub f_input: T,
    pub f_baseline: T,
}

impl<T: Scalar> IntegratedGradients<T> {
    /// One value per row: the attribution summed over the last axis.
    pub fn row_sums(&self) -> Vec<T> {
        let cols = if self.attributions.shape().len() == 2 { self.attributions.cols() } else { 1 };
        self.attributions.data().chunks(cols.max(1)).map(|c| c.iter().copied().sum()).collect()
    }

    /// `|Σ attributions − (F(x) − F(baseline))|`.
    pub fn completeness_gap(&self) -> T {
        let total: T = self.attributions.data().iter().copied().sum();
        (total - (self.f_input - self.f_baseline)).abs()
    }
}

fn eval_at<'a, T: Scalar, F>(f: &F, point: Tensor<T>, grad: bool) -> Result<(T, Option<Vec<T>>)>
where
    F: Fn(&mut Tape<'a, T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point, grad)?;
    let y = f(&mut tape, x)?;
    let value = tape.scalar(y);
    if !grad {
        return Ok((value, None));
    }
    let g = tape.backward(y)?;
    let n = tape.value(x).len();
    Ok((value, Some(g.wrt(x).map_or_else(|| vec![T::zero(); n], <[T]>::to_vec))))
}

/// Right Riemann sum of `∂F/∂x` along the straight path from `baseline` to `x`, times `x − baseline`.
pub fn integrated_gradients<'a, T: Scalar, F>(f: F, x: &Tensor<T>, baseline: &Tensor<T>, steps: usize) -> Result<IntegratedGradients<T>>
where
    F: Fn(&mut Tape<'a, T>, Var) -> Result<Var>,
{
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    if x.shape() != baseline.shape() {
        return Err(Error::shape("integrated_gradients", x.shape(), baseline.shape()));
    }
    let diff: Vec<T> = x.data().iter().zip(baseline.data()).map(|(&a, &b)| a - b).collect();
    let mut total = vec![T::zero(); diff.len()];
    let m = T::from_usize(steps).expect("step count fits the scalar");
    for k in 1..=steps {
        let alpha = T::from_usize(k).expect("step index fits the scalar") / m;
        let point: Vec<T> = baseline.data().iter().zip(&diff).map(|(&b, &d)| b + alpha * d).collect();
        let (_, g) = eval_at(&f, Tensor::new(x.shape().to_vec(), point)?, true)?;
        let g = g.expect("requested");
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("integrated_gradients", format!("non-finite gradient at step {k}")));
        }
        total.iter_mut().zip(&g).for_each(|(t, &v)| *t += v);
    }
    let attr: Vec<T> = total.iter().zip(&diff).map(|(&g, &d)| g / m * d).collect();
    Ok(IntegratedGradients {
        attributions: Tensor::new(x.shape().to_vec(), attr)?,
        f_input: eval_at(&f, x.clone(), false)?.0,
        f_baseline: eval_at(&f, baseline.clone(), false)?.0,
    })
}

/// Per word, the token value of largest magnitude (sign kept); ties keep the earliest token.
pub fn merge_to_words(values: &[f64], spans: &[Range<usize>]) -> Result<Vec<f64>> {
    let mut next = 0;
    for s in spans {
        if s.start != next || s.end <= s.start {
            return Err(Error::Segmentation(format!(
                "span {}..{} does not continue the partition at {next}",
                s.start, s.end
            )));
        }
        next = s.end;
    }
    if next != values.len() {
        return Err(Error::Segmentation(format!("spans cover {next} of {} tokens", values.len())));
    }
    Ok(spans
        .iter()
        .map(|s| {
            values[s.clone()]
                .iter()
                .copied()
                .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best })
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordAttribution {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub example_id: String,
    /// Index of the target in the example's candidate list.
    pub target: usize,
    pub target_idiom: String,
    pub steps: usize,
    pub tokens: Vec<String>,
    pub token_values: Vec<f64>,
    pub words: Vec<WordAttribution>,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_gap: f64,
}

fn token_text(s: Option<Symbol>) -> String {
    match s {
        Some(Symbol::Cls) => "[CLS]".into(),
        Some(Symbol::Sep) => "[SEP]".into(),
        Some(Symbol::Mask) => "[MASK]".into(),
        Some(Symbol::OtherBlank) => "[BLANK]".into(),
        Some(Symbol::Pad) => "[PAD]".into(),
        Some(Symbol::Char(c)) => c.to_string(),
        None => "[UNK]".into(),
    }
}

/// Word spans over the model input: CLS, SEP and appended tokens are singletons;
/// passage words are clipped to the window.
fn input_spans(ex: &ClozeExample, source: Range<usize>, input_len: usize) -> Vec<Range<usize>> {
    let passage_len = source.len();
    let mut spans = vec![0..1];
    let lengths: Vec<usize> = ex.words.clone().unwrap_or_else(|| vec![1; ex.tokens.len()]);
    let mut at = 0;
    for len in lengths {
        let (s, e) = (at.max(source.start), (at + len).min(source.end));
        if s < e {
            spans.push(1 + s - source.start..1 + e - source.start);
        }
        at += len;
    }
    let tail = 1 + passage_len;
    spans.extend((tail..input_len).map(|i| i..i + 1));
    spans
}

/// Attributes the pre-softmax score of candidate `target` to the input tokens.
///
/// The baseline replaces every token embedding row by zeros; position
/// embeddings stay. For the character-sequence head the input is the
/// target candidate's own pass, appended idiom characters included.
pub fn attribute<'m, T: Scalar>(model: &'m ClozeModel<T>, ex: &ClozeExample, target: usize, steps: usize) -> Result<AttributionReport> {
    if target >= ex.candidates.len() {
        return Err(Error::Index {
            what: "candidates",
            index: target,
            len: ex.candidates.len(),
        });
    }
    let prepared = model.prepare(ex)?;
    let window = ex.window(model.config().max_len)?;
    let ids = match model.head() {
        HeadVariant::CharSeq => model.charseq_input(&prepared, ex.candidates[target])?,
        _ => prepared.ids.clone(),
    };
    let table = model.params().get(model.encoder().token_embedding());
    let d = model.hidden();
    let mut x = Vec::with_capacity(ids.len() * d);
    for &i in &ids {
        x.extend_from_slice(table.row(i));
    }
    let x = Tensor::new(vec![ids.len(), d], x)?;
    let baseline = Tensor::zeros(vec![ids.len(), d]);
    let store = model.params();
    let f = |tape: &mut Tape<'m, T>, emb: Var| -> Result<Var> {
        let vars = store.bind(tape)?;
        let states = model.encoder().forward_embeddings(tape, &vars, emb, None, None, None)?;
        if model.head() == HeadVariant::CharSeq {
            let w = store.find("head.cls.weight").expect("charseq weight");
            let b = store.find("head.cls.bias").expect("charseq bias");
            let cls = tape.row(states, 0)?;
            let s = tape.dot(cls, vars[w.0])?;
            let bias = tape.select(vars[b.0], 0)?;
            return tape.add(s, bias);
        }
        let logits = model.head_logits(tape, &vars, states, prepared.blank_index, &ex.candidates, false)?;
        tape.select(logits.candidates, target)
    };
    let ig = integrated_gradients(f, &x, &baseline, steps)?;
    let token_values: Vec<f64> = ig.row_sums().iter().map(|v| v.to_f64_lossless()).collect();
    let tokens: Vec<String> = ids
        .iter()
        .enumerate()
        .map(|(k, &i)| match i {
            CLS_ID if k == 0 => "[CLS]".into(),
            SEP_ID => "[SEP]".into(),
            _ => token_text(model.tokens().symbol(i)),
        })
        .collect();
    let spans = input_spans(ex, window.source.clone(), ids.len());
    let merged = merge_to_words(&token_values, &spans)?;
    let words = spans
        .iter()
        .zip(merged)
        .map(|(s, value)| WordAttribution {
            start: s.start,
            end: s.end,
            text: tokens[s.clone()].concat(),
            value,
        })
        .collect();
    Ok(AttributionReport {
        example_id: ex.id.clone(),
        target,
        target_idiom: model.idioms().surface(ex.candidates[target]).to_string(),
        steps,
        tokens,
        token_values,
        words,
        f_input: ig.f_input.to_f64_lossless(),
        f_baseline: ig.f_baseline.to_f64_lossless(),
        completeness_gap: ig.completeness_gap().to_f64_lossless(),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone HTML heatmap: red for positive words, blue for negative, opacity by |value| / max |value|.
pub fn render_report(report: &AttributionReport) -> String {
    let max = report.words.iter().map(|w| w.value.abs()).fold(0.0, f64::max);
    let mut body = String::new();
    for w in &report.words {
        let style = if max > 0.0 && w.value != 0.0 {
            let a = w.value.abs() / max;
            let rgb = if w.value > 0.0 { "220, 38, 38" } else { "37, 99, 235" };
            format!(" style=\"background-color: rgba({rgb}, {a:.4})\"")
        } else {
            String::new()
        };
        let _ = write!(body, "<span class=\"w\" data-value=\"{:.4}\"{style}>{}</span>", w.value, escape(&w.text));
    }
    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{id}</title>\n<style>.w {{ padding: 0 1px; }}</style>\n</head>\n<body>\n<p>{id}: candidate {t} ({idiom})</p>\n<p>{body}</p>\n</body>\n</html>\n",
        id = escape(&report.example_id),
        t = report.target,
        idiom = escape(&report.target_idiom),
    )
}
