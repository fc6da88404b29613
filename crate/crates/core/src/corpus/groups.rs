use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{IdiomId, IdiomVocabulary};
use crate::error::{Error, Result};

/// Several blanks that share one candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateGroup {
    pub group_id: String,
    pub candidates: Vec<IdiomId>,
    pub members: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGroup {
    group_id: String,
    candidates: Vec<String>,
    members: Vec<String>,
}

pub fn load_groups(path: &Path, vocab: &IdiomVocabulary) -> Result<Vec<CandidateGroup>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawGroup = serde_json::from_str(&line).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let candidates = raw
            .candidates
            .iter()
            .map(|c| vocab.get(c).ok_or_else(|| Error::UnknownIdiom(c.clone())))
            .collect::<Result<Vec<_>>>()?;
        out.push(CandidateGroup {
            group_id: raw.group_id,
            candidates,
            members: raw.members,
        });
    }
    Ok(out)
}

pub fn write_groups(path: &Path, groups: &[CandidateGroup], vocab: &IdiomVocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for g in groups {
        let raw = RawGroup {
            group_id: g.group_id.clone(),
            candidates: g.candidates.iter().map(|&c| vocab.surface(c).to_string()).collect(),
            members: g.members.clone(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
