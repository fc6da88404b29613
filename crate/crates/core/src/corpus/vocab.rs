use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One position of a tokenized passage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symbol {
    Cls,
    Sep,
    /// The target blank.
    Mask,
    /// Any other blank that shares the window with the target.
    OtherBlank,
    Pad,
    Char(char),
}

impl Symbol {
    pub fn is_blank(self) -> bool {
        matches!(self, Symbol::Mask | Symbol::OtherBlank)
    }
}

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const MASK_ID: usize = 2;
pub const OTHER_BLANK_ID: usize = 3;
pub const PAD_ID: usize = 4;
pub const UNK_ID: usize = 5;
const FIRST_CHAR_ID: usize = 6;

/// Character vocabulary for the encoder, with reserved ids 0–5 for the
/// specials and UNK. Lookup never fails.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct TokenVocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<String> for TokenVocabulary {
    fn from(s: String) -> Self {
        let mut v = TokenVocabulary::default();
        v.extend(s.chars());
        v
    }
}

impl From<TokenVocabulary> for String {
    fn from(v: TokenVocabulary) -> Self {
        v.chars.into_iter().collect()
    }
}

impl TokenVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds unseen characters in order of appearance.
    pub fn extend(&mut self, chars: impl IntoIterator<Item = char>) {
        for c in chars {
            if !self.index.contains_key(&c) {
                self.index.insert(c, FIRST_CHAR_ID + self.chars.len());
                self.chars.push(c);
            }
        }
    }

    pub fn len(&self) -> usize {
        FIRST_CHAR_ID + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, s: Symbol) -> usize {
        match s {
            Symbol::Cls => CLS_ID,
            Symbol::Sep => SEP_ID,
            Symbol::Mask => MASK_ID,
            Symbol::OtherBlank => OTHER_BLANK_ID,
            Symbol::Pad => PAD_ID,
            Symbol::Char(c) => self.index.get(&c).copied().unwrap_or(UNK_ID),
        }
    }

    pub fn ids(&self, symbols: &[Symbol]) -> Vec<usize> {
        symbols.iter().map(|&s| self.id(s)).collect()
    }

    /// Inverse of [`TokenVocabulary::id`]; UNK maps to `None`.
    pub fn symbol(&self, id: usize) -> Option<Symbol> {
        match id {
            CLS_ID => Some(Symbol::Cls),
            SEP_ID => Some(Symbol::Sep),
            MASK_ID => Some(Symbol::Mask),
            OTHER_BLANK_ID => Some(Symbol::OtherBlank),
            PAD_ID => Some(Symbol::Pad),
            UNK_ID => None,
            _ => self.chars.get(id - FIRST_CHAR_ID).map(|&c| Symbol::Char(c)),
        }
    }
}

/// Dense index into an [`IdiomVocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IdiomId(pub usize);

impl fmt::Display for IdiomId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const IDIOM_CHARS: usize = 4;

/// The idiom set, ids assigned in first-insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct IdiomVocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, IdiomId>,
}

impl TryFrom<Vec<String>> for IdiomVocabulary {
    type Error = Error;

    fn try_from(list: Vec<String>) -> Result<Self> {
        let mut v = IdiomVocabulary::default();
        for s in list {
            if v.get(&s).is_some() {
                return Err(Error::Format(format!("duplicate idiom {s:?}")));
            }
            v.insert(&s)?;
        }
        Ok(v)
    }
}

impl From<IdiomVocabulary> for Vec<String> {
    fn from(v: IdiomVocabulary) -> Self {
        v.surfaces
    }
}

impl IdiomVocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the existing id or assigns the next one.
    pub fn insert(&mut self, surface: &str) -> Result<IdiomId> {
        if let Some(&id) = self.index.get(surface) {
            return Ok(id);
        }
        if surface.chars().count() != IDIOM_CHARS {
            return Err(Error::Format(format!(
                "idiom {surface:?} is not {IDIOM_CHARS} characters long"
            )));
        }
        let id = IdiomId(self.surfaces.len());
        self.surfaces.push(surface.to_string());
        self.index.insert(surface.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, surface: &str) -> Option<IdiomId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: IdiomId) -> &str {
        &self.surfaces[id.0]
    }

    pub fn chars(&self, id: IdiomId) -> impl Iterator<Item = char> + '_ {
        self.surfaces[id.0].chars()
    }

    pub fn contains(&self, id: IdiomId) -> bool {
        id.0 < self.surfaces.len()
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = IdiomId> {
        (0..self.surfaces.len()).map(IdiomId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (IdiomId, &str)> {
        self.surfaces.iter().enumerate().map(|(i, s)| (IdiomId(i), s.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_reserved_ids() {
        let mut v = TokenVocabulary::new();
        v.extend("ab".chars());
        assert_eq!(v.id(Symbol::Cls), 0);
        assert_eq!(v.id(Symbol::Sep), 1);
        assert_eq!(v.id(Symbol::Mask), 2);
        assert_eq!(v.id(Symbol::OtherBlank), 3);
        assert_eq!(v.id(Symbol::Pad), 4);
        assert_eq!(v.id(Symbol::Char('z')), UNK_ID);
        assert_eq!(v.id(Symbol::Char('a')), 6);
        assert_eq!(v.symbol(7), Some(Symbol::Char('b')));
        assert_eq!(v.len(), 8);
    }

    #[test]
    fn idiom_ids_follow_insertion_order() {
        let mut v = IdiomVocabulary::new();
        assert_eq!(v.insert("一二三四").unwrap(), IdiomId(0));
        assert_eq!(v.insert("五六七八").unwrap(), IdiomId(1));
        assert_eq!(v.insert("一二三四").unwrap(), IdiomId(0));
        assert!(v.insert("太短").is_err());
        let json = serde_json::to_string(&v).unwrap();
        let back: IdiomVocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }
}
