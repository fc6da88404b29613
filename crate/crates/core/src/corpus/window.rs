use std::ops::Range;

use super::vocab::Symbol;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 128;

/// `CLS + left context + MASK + right context + SEP`, cut from a passage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub symbols: Vec<Symbol>,
    /// Position of the MASK token in `symbols`.
    pub blank_index: usize,
    /// Range of the input passage covered by the window (MASK included).
    pub source: Range<usize>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Cuts a window of at most `max_len` tokens centered on the blank at `target`.
///
/// The context budget is `max_len - 3`. The left side gets `budget / 2`
/// tokens and the right side the rest; a side shorter than its share passes
/// the surplus to the other. The target becomes MASK and any other blank
/// becomes OTHER_BLANK. A leading CLS and trailing SEP on the input are
/// treated as existing framing, so windowing a window returns it unchanged.
pub fn tokenize_window(tokens: &[Symbol], target: usize, max_len: usize) -> Result<Window> {
    if max_len < 8 {
        return Err(Error::Config(format!("window length {max_len} is below 8")));
    }
    let lo = usize::from(tokens.first() == Some(&Symbol::Cls));
    let hi = tokens.len() - usize::from(tokens.len() > lo && tokens.last() == Some(&Symbol::Sep));
    if target < lo || target >= hi || !tokens[target].is_blank() {
        return Err(Error::MalformedExample {
            id: "<window>".into(),
            reason: format!("no blank at target position {target}"),
        });
    }

    let budget = max_len - 3;
    let left_avail = target - lo;
    let right_avail = hi - target - 1;
    let mut left = left_avail.min(budget / 2);
    let mut right = right_avail.min(budget - budget / 2);
    if left < budget / 2 {
        right = right_avail.min(budget - left);
    } else if right < budget - budget / 2 {
        left = left_avail.min(budget - right);
    }

    let start = target - left;
    let end = target + 1 + right;
    let mut symbols = Vec::with_capacity(end - start + 2);
    symbols.push(Symbol::Cls);
    for (i, &s) in tokens[start..end].iter().enumerate() {
        let s = if start + i == target {
            Symbol::Mask
        } else if s.is_blank() {
            Symbol::OtherBlank
        } else {
            s
        };
        symbols.push(s);
    }
    symbols.push(Symbol::Sep);
    Ok(Window {
        symbols,
        blank_index: left + 1,
        source: start..end,
    })
}
