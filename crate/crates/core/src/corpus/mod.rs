//! Dataset model, file formats, windowing and the synthetic generator.

mod dataset;
mod groups;
mod synth;
mod vocab;
mod window;

pub use dataset::{
    load_dataset, load_dataset_into, parse_text, write_dataset, ClozeExample, RawExample, PLACEHOLDER,
};
pub use groups::{load_groups, write_groups, CandidateGroup};
pub use synth::{generate_groups, generate_synthetic, SyntheticCorpus, SyntheticSpec};
pub use vocab::{
    IdiomId, IdiomVocabulary, Symbol, TokenVocabulary, CLS_ID, IDIOM_CHARS, MASK_ID, OTHER_BLANK_ID, PAD_ID,
    SEP_ID, UNK_ID,
};
pub use window::{tokenize_window, Window, DEFAULT_MAX_LEN};

/// Splits into train/dev/test by example index, 80/10/10.
pub fn split_80_10_10<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let train = n * 8 / 10;
    let dev = n / 10;
    (
        items[..train].to_vec(),
        items[train..train + dev].to_vec(),
        items[train + dev..].to_vec(),
    )
}

/// Token vocabulary covering every passage character and every idiom character.
pub fn build_token_vocabulary(examples: &[ClozeExample], idioms: &IdiomVocabulary) -> TokenVocabulary {
    let mut v = TokenVocabulary::new();
    for ex in examples {
        v.extend(ex.chars());
    }
    for (_, s) in idioms.iter() {
        v.extend(s.chars());
    }
    v
}
