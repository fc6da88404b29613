//! Synthetic idiom language for desk-scale experiments.
//!
//! Every idiom has a syntactic class and a topic. A passage is built from
//! topic words scattered among filler characters, plus a class-specific
//! marker on each side of the blank. The gold idiom matches both the class
//! and the topic; distractors share only one of the two (or neither), so a
//! model has to read the local template and the global topic to answer.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::ClozeExample;
use super::groups::CandidateGroup;
use super::vocab::{IdiomId, IdiomVocabulary, Symbol, IDIOM_CHARS};
use crate::error::{Error, Result};

const FILLERS: usize = 24;
const MARKERS_PER_SIDE: usize = 2;
const TOPIC_WORDS: usize = 6;
const TOPIC_WORD_LEN: usize = 2;
const MIN_WORDS: usize = 8;
const MAX_WORDS: usize = 14;
const TOPIC_WORD_RATE: f64 = 0.35;
const MIN_TOPIC_WORDS: usize = 2;
const FIRST_CODE_POINT: u32 = 0x4E00;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub idioms: usize,
    pub classes: usize,
    pub topics: usize,
    pub examples: usize,
    pub candidates: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            idioms: 120,
            classes: 4,
            topics: 10,
            examples: 20_000,
            candidates: 7,
            seed: 42,
        }
    }
}

/// Generated examples plus the latent labels used to build them.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub examples: Vec<ClozeExample>,
    pub vocab: IdiomVocabulary,
    pub idiom_class: Vec<usize>,
    pub idiom_topic: Vec<usize>,
    /// `(class, topic)` of each passage.
    pub passage_labels: Vec<(usize, usize)>,
}

struct Alphabet {
    fillers: Vec<char>,
    left_markers: Vec<Vec<char>>,
    right_markers: Vec<Vec<char>>,
    topic_words: Vec<Vec<[char; TOPIC_WORD_LEN]>>,
    idioms: Vec<String>,
}

impl Alphabet {
    fn new(spec: &SyntheticSpec) -> Self {
        let mut next = FIRST_CODE_POINT;
        let mut take = || {
            let c = char::from_u32(next).expect("code point in the CJK block");
            next += 1;
            c
        };
        let fillers = (0..FILLERS).map(|_| take()).collect();
        let left_markers = (0..spec.classes)
            .map(|_| (0..MARKERS_PER_SIDE).map(|_| take()).collect())
            .collect();
        let right_markers = (0..spec.classes)
            .map(|_| (0..MARKERS_PER_SIDE).map(|_| take()).collect())
            .collect();
        let topic_words = (0..spec.topics)
            .map(|_| (0..TOPIC_WORDS).map(|_| [take(), take()]).collect())
            .collect();
        let idioms = (0..spec.idioms)
            .map(|_| (0..IDIOM_CHARS).map(|_| take()).collect())
            .collect();
        Alphabet {
            fillers,
            left_markers,
            right_markers,
            topic_words,
            idioms,
        }
    }
}

fn class_of(idiom: usize, spec: &SyntheticSpec) -> usize {
    idiom % spec.classes
}

fn topic_of(idiom: usize, spec: &SyntheticSpec) -> usize {
    (idiom / spec.classes) % spec.topics
}

fn validate(spec: &SyntheticSpec) -> Result<()> {
    if spec.classes == 0 || spec.topics == 0 || spec.candidates == 0 {
        return Err(Error::Config("classes, topics and candidates must be positive".into()));
    }
    if spec.idioms < spec.candidates {
        return Err(Error::Config(format!(
            "{} idioms cannot fill {} candidates",
            spec.idioms, spec.candidates
        )));
    }
    // Distractors may not share the gold's (class, topic) cell.
    for g in 0..spec.idioms.min(spec.classes * spec.topics) {
        let cell = (0..spec.idioms)
            .filter(|&i| class_of(i, spec) == class_of(g, spec) && topic_of(i, spec) == topic_of(g, spec))
            .count();
        if spec.idioms - cell < spec.candidates - 1 {
            return Err(Error::Config(format!(
                "only {} idioms lie outside a gold's class/topic cell; {} distractors needed",
                spec.idioms - cell,
                spec.candidates - 1
            )));
        }
    }
    Ok(())
}

/// Builds one passage; returns its tokens and word lengths.
fn passage(alpha: &Alphabet, class: usize, topic: usize, rng: &mut ChaCha8Rng) -> (Vec<Symbol>, Vec<usize>) {
    let n_words = rng.random_range(MIN_WORDS..=MAX_WORDS);
    let mut is_topic: Vec<bool> = (0..n_words).map(|_| rng.random_bool(TOPIC_WORD_RATE)).collect();
    while is_topic.iter().filter(|&&t| t).count() < MIN_TOPIC_WORDS {
        let i = rng.random_range(0..n_words);
        is_topic[i] = true;
    }
    let blank_at = rng.random_range(0..=n_words);

    let mut tokens = Vec::new();
    let mut words = Vec::new();
    for (i, &t) in is_topic.iter().enumerate() {
        if i == blank_at {
            push_template(alpha, class, rng, &mut tokens, &mut words);
        }
        if t {
            let w = alpha.topic_words[topic].choose(rng).unwrap();
            tokens.extend(w.iter().map(|&c| Symbol::Char(c)));
            words.push(TOPIC_WORD_LEN);
        } else {
            tokens.push(Symbol::Char(*alpha.fillers.choose(rng).unwrap()));
            words.push(1);
        }
    }
    if blank_at == n_words {
        push_template(alpha, class, rng, &mut tokens, &mut words);
    }
    (tokens, words)
}

fn push_template(alpha: &Alphabet, class: usize, rng: &mut ChaCha8Rng, tokens: &mut Vec<Symbol>, words: &mut Vec<usize>) {
    tokens.push(Symbol::Char(*alpha.left_markers[class].choose(rng).unwrap()));
    tokens.push(Symbol::Mask);
    tokens.push(Symbol::Char(*alpha.right_markers[class].choose(rng).unwrap()));
    words.extend([1, 1, 1]);
}

fn distractors(gold: usize, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (gc, gt) = (class_of(gold, spec), topic_of(gold, spec));
    let need = spec.candidates - 1;
    let n_class = need.div_ceil(3);
    let n_topic = (need + 1) / 3;

    let mut same_class: Vec<usize> = (0..spec.idioms)
        .filter(|&i| class_of(i, spec) == gc && topic_of(i, spec) != gt)
        .collect();
    let mut same_topic: Vec<usize> = (0..spec.idioms)
        .filter(|&i| topic_of(i, spec) == gt && class_of(i, spec) != gc)
        .collect();
    same_class.shuffle(rng);
    same_topic.shuffle(rng);

    let mut chosen: Vec<usize> = same_class.into_iter().take(n_class).collect();
    chosen.extend(same_topic.into_iter().take(n_topic));
    let mut rest: Vec<usize> = (0..spec.idioms)
        .filter(|&i| !(class_of(i, spec) == gc && topic_of(i, spec) == gt) && !chosen.contains(&i))
        .collect();
    rest.shuffle(rng);
    chosen.extend(rest.into_iter().take(need - chosen.len()));
    chosen
}

fn vocabulary(alpha: &Alphabet) -> Result<IdiomVocabulary> {
    let mut vocab = IdiomVocabulary::new();
    for s in &alpha.idioms {
        vocab.insert(s)?;
    }
    Ok(vocab)
}

/// Generates a corpus; a pure function of `spec`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    validate(spec)?;
    let alpha = Alphabet::new(spec);
    let vocab = vocabulary(&alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut examples = Vec::with_capacity(spec.examples);
    let mut labels = Vec::with_capacity(spec.examples);
    for n in 0..spec.examples {
        let gold = rng.random_range(0..spec.idioms);
        let (class, topic) = (class_of(gold, spec), topic_of(gold, spec));
        let (tokens, words) = passage(&alpha, class, topic, &mut rng);
        let mut cands = distractors(gold, spec, &mut rng);
        cands.push(gold);
        cands.shuffle(&mut rng);
        let gold_index = cands.iter().position(|&c| c == gold).unwrap();
        let mut ex = ClozeExample::new(
            format!("syn-{n:06}"),
            tokens,
            cands.into_iter().map(IdiomId).collect(),
            gold_index,
        )?;
        ex.words = Some(words);
        examples.push(ex);
        labels.push((class, topic));
    }

    Ok(SyntheticCorpus {
        examples,
        vocab,
        idiom_class: (0..spec.idioms).map(|i| class_of(i, spec)).collect(),
        idiom_topic: (0..spec.idioms).map(|i| topic_of(i, spec)).collect(),
        passage_labels: labels,
    })
}

/// Generates competition-style groups: each group draws `size` distinct
/// idioms as its shared candidate list and has one member passage per
/// candidate, with that candidate as gold. Uses the idiom alphabet of `spec`.
pub fn generate_groups(
    spec: &SyntheticSpec,
    groups: usize,
    size: usize,
    seed: u64,
) -> Result<(Vec<ClozeExample>, Vec<CandidateGroup>)> {
    validate(spec)?;
    if size == 0 || size > spec.idioms {
        return Err(Error::Config(format!("group size {size} outside 1..={}", spec.idioms)));
    }
    let alpha = Alphabet::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(groups * size);
    let mut out = Vec::with_capacity(groups);
    let all: Vec<usize> = (0..spec.idioms).collect();
    for g in 0..groups {
        let mut cands: Vec<usize> = all.choose_multiple(&mut rng, size).copied().collect();
        cands.shuffle(&mut rng);
        let candidates: Vec<IdiomId> = cands.iter().map(|&c| IdiomId(c)).collect();
        let mut members = Vec::with_capacity(size);
        for (m, &gold) in cands.iter().enumerate() {
            let (tokens, words) = passage(&alpha, class_of(gold, spec), topic_of(gold, spec), &mut rng);
            let id = format!("grp-{g:05}-{m}");
            let mut ex = ClozeExample::new(id.clone(), tokens, candidates.clone(), m)?;
            ex.words = Some(words);
            examples.push(ex);
            members.push(id);
        }
        out.push(CandidateGroup {
            group_id: format!("grp-{g:05}"),
            candidates,
            members,
        });
    }
    Ok((examples, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            examples: 1000,
            seed: 13,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.examples, b.examples);
        let c = generate_synthetic(&SyntheticSpec { seed: 14, ..small() }).unwrap();
        assert_ne!(a.examples, c.examples);
    }

    #[test]
    fn gold_matches_passage_class_and_topic() {
        let c = generate_synthetic(&small()).unwrap();
        for (ex, &(class, topic)) in c.examples.iter().zip(&c.passage_labels) {
            let g = ex.gold_idiom().0;
            assert_eq!(c.idiom_class[g], class);
            assert_eq!(c.idiom_topic[g], topic);
        }
    }

    #[test]
    fn distractor_audit() {
        let c = generate_synthetic(&small()).unwrap();
        for ex in &c.examples {
            let g = ex.gold_idiom().0;
            let (gc, gt) = (c.idiom_class[g], c.idiom_topic[g]);
            let others: Vec<usize> = ex.candidates.iter().map(|i| i.0).filter(|&i| i != g).collect();
            assert_eq!(others.len(), 6);
            assert!(others.iter().any(|&i| c.idiom_class[i] == gc && c.idiom_topic[i] != gt));
            assert!(others.iter().any(|&i| c.idiom_topic[i] == gt && c.idiom_class[i] != gc));
            assert!(others.iter().all(|&i| !(c.idiom_class[i] == gc && c.idiom_topic[i] == gt)));
            let mut uniq = ex.candidates.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), 7);
        }
    }

    #[test]
    fn rejects_more_candidates_than_idioms() {
        let spec = SyntheticSpec {
            idioms: 5,
            candidates: 7,
            ..small()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn groups_have_one_member_per_candidate() {
        let (ex, groups) = generate_groups(&small(), 20, 5, 3).unwrap();
        assert_eq!(ex.len(), 100);
        for g in &groups {
            assert_eq!(g.members.len(), g.candidates.len());
            let golds: Vec<IdiomId> = g
                .members
                .iter()
                .map(|m| ex.iter().find(|e| &e.id == m).unwrap().gold_idiom())
                .collect();
            let mut sorted = golds.clone();
            sorted.sort();
            let mut cands = g.candidates.clone();
            cands.sort();
            assert_eq!(sorted, cands);
        }
    }

    #[test]
    fn words_partition_passages() {
        let c = generate_synthetic(&small()).unwrap();
        for ex in &c.examples {
            ex.validate().unwrap();
            assert!(ex.words.is_some());
        }
    }
}
