use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::{IdiomId, IdiomVocabulary, Symbol};
use super::window::{tokenize_window, Window};
use crate::error::{Error, Result};

/// Blank placeholder used in dataset text.
pub const PLACEHOLDER: &str = "#idiom#";

/// One passage window with a target blank and its candidate idioms.
#[derive(Clone, Debug, PartialEq)]
pub struct ClozeExample {
    pub id: String,
    /// Passage tokens; the target blank is the single `Mask`, other blanks are `OtherBlank`.
    pub tokens: Vec<Symbol>,
    pub candidates: Vec<IdiomId>,
    pub gold: usize,
    /// Word lengths in tokens, partitioning `tokens`, when a segmentation is known.
    pub words: Option<Vec<usize>>,
}

impl ClozeExample {
    pub fn new(id: String, tokens: Vec<Symbol>, candidates: Vec<IdiomId>, gold: usize) -> Result<Self> {
        let ex = ClozeExample {
            id,
            tokens,
            candidates,
            gold,
            words: None,
        };
        ex.validate()?;
        Ok(ex)
    }

    fn malformed(&self, reason: impl Into<String>) -> Error {
        Error::MalformedExample {
            id: self.id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let masks = self.tokens.iter().filter(|&&s| s == Symbol::Mask).count();
        if masks != 1 {
            return Err(self.malformed(format!("{masks} target blanks, expected exactly one")));
        }
        if self.candidates.is_empty() {
            return Err(self.malformed("no candidates"));
        }
        if self.gold >= self.candidates.len() {
            return Err(self.malformed(format!(
                "answer {} outside {} candidates",
                self.gold,
                self.candidates.len()
            )));
        }
        if let Some(w) = &self.words {
            if w.iter().sum::<usize>() != self.tokens.len() || w.contains(&0) {
                return Err(self.malformed("word segmentation does not partition the passage"));
            }
        }
        Ok(())
    }

    pub fn target_position(&self) -> usize {
        self.tokens
            .iter()
            .position(|&s| s == Symbol::Mask)
            .expect("validated example has a target blank")
    }

    pub fn gold_idiom(&self) -> IdiomId {
        self.candidates[self.gold]
    }

    pub fn window(&self, max_len: usize) -> Result<Window> {
        tokenize_window(&self.tokens, self.target_position(), max_len)
    }

    /// Characters of the passage, for building token vocabularies.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.tokens.iter().filter_map(|s| match s {
            Symbol::Char(c) => Some(*c),
            _ => None,
        })
    }
}

/// Canonical dataset line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawExample {
    pub id: String,
    pub text: String,
    pub target: usize,
    pub candidates: Vec<String>,
    pub answer: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub words: Option<Vec<String>>,
}

/// Splits text into character symbols, each `#idiom#` (or `#idiomNNN#`) becoming one blank.
pub fn parse_text(text: &str) -> Vec<Symbol> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if let Some(len) = placeholder_len(rest) {
            out.push(Symbol::OtherBlank);
            rest = &rest[len..];
        } else {
            out.push(Symbol::Char(c));
            rest = &rest[c.len_utf8()..];
        }
    }
    out
}

fn placeholder_len(s: &str) -> Option<usize> {
    let tail = s.strip_prefix("#idiom")?;
    let digits = tail.bytes().take_while(u8::is_ascii_digit).count();
    tail[digits..].starts_with('#').then_some(6 + digits + 1)
}

fn render_text(tokens: &[Symbol]) -> String {
    let mut s = String::new();
    for t in tokens {
        match t {
            Symbol::Char(c) => s.push(*c),
            _ => s.push_str(PLACEHOLDER),
        }
    }
    s
}

/// Resolves candidate strings against `vocab`, growing it or rejecting unknown idioms.
fn resolve(vocab: &mut IdiomVocabulary, surfaces: &[String], grow: bool) -> Result<Vec<IdiomId>> {
    surfaces
        .iter()
        .map(|s| {
            if grow {
                vocab.insert(s)
            } else {
                vocab.get(s).ok_or_else(|| Error::UnknownIdiom(s.clone()))
            }
        })
        .collect()
}

impl RawExample {
    pub fn into_example(self, vocab: &mut IdiomVocabulary, grow: bool) -> Result<ClozeExample> {
        let mut tokens = parse_text(&self.text);
        let blank = tokens
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_blank())
            .nth(self.target)
            .map(|(i, _)| i)
            .ok_or_else(|| Error::MalformedExample {
                id: self.id.clone(),
                reason: format!("no placeholder with index {}", self.target),
            })?;
        tokens[blank] = Symbol::Mask;
        if self.answer >= self.candidates.len() {
            return Err(Error::MalformedExample {
                id: self.id,
                reason: format!("answer {} not among {} candidates", self.answer, self.candidates.len()),
            });
        }
        let words = self
            .words
            .map(|ws| ws.iter().map(|w| parse_text(w).len()).collect::<Vec<_>>());
        let ex = ClozeExample {
            id: self.id,
            tokens,
            candidates: resolve(vocab, &self.candidates, grow)?,
            gold: self.answer,
            words,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn from_example(ex: &ClozeExample, vocab: &IdiomVocabulary) -> Self {
        let target = ex.tokens[..ex.target_position()].iter().filter(|s| s.is_blank()).count();
        let words = ex.words.as_ref().map(|ws| {
            let mut at = 0;
            ws.iter()
                .map(|&n| {
                    let w = render_text(&ex.tokens[at..at + n]);
                    at += n;
                    w
                })
                .collect()
        });
        RawExample {
            id: ex.id.clone(),
            text: render_text(&ex.tokens),
            target,
            candidates: ex.candidates.iter().map(|&c| vocab.surface(c).to_string()).collect(),
            answer: ex.gold,
            words,
        }
    }
}

fn schema_error(path: &Path, line: usize, reason: impl ToString) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        line,
        reason: reason.to_string(),
    }
}

/// Parses one line of the public ChID release, `{"content", "candidates": [[..]], "groundTruth": [..]}`,
/// into one canonical record per blank.
fn expand_official(value: Value, line: usize) -> std::result::Result<Vec<RawExample>, String> {
    #[derive(Deserialize)]
    #[serde(rename_all = "camelCase")]
    struct Official {
        content: String,
        candidates: Vec<Vec<String>>,
        ground_truth: Vec<String>,
    }
    let o: Official = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if o.candidates.len() != o.ground_truth.len() {
        return Err("candidates and groundTruth lengths differ".into());
    }
    o.candidates
        .into_iter()
        .zip(o.ground_truth)
        .enumerate()
        .map(|(k, (cands, truth))| {
            let answer = cands
                .iter()
                .position(|c| *c == truth)
                .ok_or_else(|| format!("ground truth {truth:?} not among candidates of blank {k}"))?;
            Ok(RawExample {
                id: format!("{line}-{k}"),
                text: o.content.clone(),
                target: k,
                candidates: cands,
                answer,
                words: None,
            })
        })
        .collect()
}

/// Reads a JSON-lines dataset, extending `vocab` when `grow` is set and
/// rejecting unknown idioms otherwise. Lines in the public ChID layout are
/// accepted too and expand to one example per blank.
pub fn load_dataset_into(path: &Path, vocab: &mut IdiomVocabulary, grow: bool) -> Result<Vec<ClozeExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| schema_error(path, lineno, e))?;
        let raws = if value.get("content").is_some() {
            expand_official(value, lineno).map_err(|e| schema_error(path, lineno, e))?
        } else {
            vec![serde_json::from_value::<RawExample>(value).map_err(|e| schema_error(path, lineno, e))?]
        };
        for raw in raws {
            out.push(raw.into_example(vocab, grow).map_err(|e| match e {
                e @ (Error::MalformedExample { .. } | Error::UnknownIdiom(_)) => e,
                other => schema_error(path, lineno, other),
            })?);
        }
    }
    Ok(out)
}

/// Reads a dataset and builds its idiom vocabulary from candidates in order of first appearance.
pub fn load_dataset(path: &Path) -> Result<(Vec<ClozeExample>, IdiomVocabulary)> {
    let mut vocab = IdiomVocabulary::new();
    let examples = load_dataset_into(path, &mut vocab, true)?;
    Ok((examples, vocab))
}

pub fn write_dataset(path: &Path, examples: &[ClozeExample], vocab: &IdiomVocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, &RawExample::from_example(ex, vocab))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn one_example_per_blank() {
        let f = write_lines(&[
            r##"{"id":"a0","text":"他#idiom#地说，又#idiom#。","target":0,"candidates":["一心一意","三心二意"],"answer":0}"##,
            r##"{"id":"a1","text":"他#idiom#地说，又#idiom#。","target":1,"candidates":["三心二意","一心一意"],"answer":0}"##,
            r##"{"id":"b0","text":"今天#idiom#","target":0,"candidates":["五湖四海","一心一意"],"answer":1}"##,
        ]);
        let (ex, vocab) = load_dataset(f.path()).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(vocab.len(), 3);
        assert_eq!(vocab.surface(IdiomId(0)), "一心一意");
        assert_eq!(vocab.surface(IdiomId(2)), "五湖四海");
        assert_eq!(ex[0].target_position(), 1);
        assert_eq!(ex[0].tokens[6], Symbol::OtherBlank);
        assert_eq!(ex[1].target_position(), 6);
        assert_eq!(ex[1].tokens[1], Symbol::OtherBlank);
        assert_eq!(ex[2].gold_idiom(), IdiomId(0));
    }

    #[test]
    fn official_layout_expands_blanks() {
        let f = write_lines(&[
            r##"{"content":"甲#idiom#乙#idiom#丙","candidates":[["一心一意","三心二意"],["五湖四海","三心二意"]],"groundTruth":["三心二意","五湖四海"]}"##,
        ]);
        let (ex, _) = load_dataset(f.path()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].gold, 1);
        assert_eq!(ex[1].gold, 0);
        assert_eq!(ex[1].target_position(), 3);
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let f = write_lines(&[]);
        let (ex, vocab) = load_dataset(f.path()).unwrap();
        assert!(ex.is_empty());
        assert!(vocab.is_empty());
    }

    #[test]
    fn schema_errors_carry_line_numbers() {
        let f = write_lines(&[
            r##"{"id":"a","text":"#idiom#","target":0,"candidates":["一心一意"],"answer":0}"##,
            r##"{"id":"b","text":"#idiom#","candidates":["一心一意"],"answer":0}"##,
        ]);
        match load_dataset(f.path()) {
            Err(Error::Schema { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn answer_outside_candidates_is_malformed() {
        let f = write_lines(&[r##"{"id":"a","text":"#idiom#","target":0,"candidates":["一心一意"],"answer":3}"##]);
        assert!(matches!(load_dataset(f.path()), Err(Error::MalformedExample { .. })));
    }

    #[test]
    fn frozen_vocabulary_rejects_unknown_idioms() {
        let f = write_lines(&[r##"{"id":"a","text":"#idiom#","target":0,"candidates":["一心一意"],"answer":0}"##]);
        let mut vocab = IdiomVocabulary::new();
        assert!(matches!(
            load_dataset_into(f.path(), &mut vocab, false),
            Err(Error::UnknownIdiom(_))
        ));
    }

    #[test]
    fn competition_placeholders_parse() {
        assert_eq!(parse_text("a#idiom000123#b").len(), 3);
        assert_eq!(parse_text("#idio#").len(), 6);
    }
}
