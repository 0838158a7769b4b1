use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved padding id.
pub const PAD_ID: u32 = 0;
pub const PAD_TOKEN: &str = "<pad>";

/// Shape colours with their RGB values.
pub const COLORS: &[(&str, [f64; 3])] = &[
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.20]),
    ("blue", [0.15, 0.25, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("orange", [1.00, 0.55, 0.05]),
    ("purple", [0.55, 0.15, 0.70]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("pink", [0.95, 0.45, 0.70]),
];

pub const BACKGROUNDS: &[(&str, [f64; 3])] = &[
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
    ("gray", [0.5, 0.5, 0.5]),
    ("navy", [0.05, 0.08, 0.30]),
    ("beige", [0.93, 0.88, 0.75]),
];

pub const SHAPES: &[&str] = &["circle", "square", "triangle", "cross", "diamond"];

/// Caption templates; `{c}`, `{s}`, `{b}` are colour, shape and background.
pub const TEMPLATES: &[&str] = &[
    "a {c} {s} on {b}",
    "{c} {s} with {b} background",
    "a {s} colored {c} on a {b} background",
    "the {c} {s} over {b}",
    "{b} background behind a {c} {s}",
];

const FILLERS: &[&str] = &["a", "on", "with", "background", "colored", "the", "over", "behind"];

/// Padded token ids plus a mask of real positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Rebuilds a sequence from a padded id row; the mask marks non-pad ids.
    pub fn from_padded(ids: Vec<u32>) -> Self {
        let mask = ids.iter().map(|&i| i != PAD_ID).collect();
        Self { ids, mask }
    }
}

/// Whitespace word vocabulary. Id 0 is the pad token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::Data(format!("vocabulary must start with {PAD_TOKEN}")));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Every word the generator can emit, in a fixed order shared by all corpora.
    pub fn standard() -> Self {
        let mut words = vec![PAD_TOKEN.to_string()];
        words.extend(FILLERS.iter().map(|s| s.to_string()));
        words.extend(COLORS.iter().map(|(s, _)| s.to_string()));
        words.extend(BACKGROUNDS.iter().map(|(s, _)| s.to_string()));
        words.extend(SHAPES.iter().map(|s| s.to_string()));
        Self::new(words).expect("standard vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub(crate) fn rebuild_index(self) -> Result<Self> {
        Self::new(self.words)
    }

    pub fn tokenize(&self, caption: &str, max_len: usize) -> Result<TokenSeq> {
        let mut ids = Vec::with_capacity(max_len);
        for w in caption.split_whitespace() {
            let id = self.id(w).filter(|&i| i != PAD_ID).ok_or_else(|| Error::Data(format!("out-of-vocabulary word {w:?}")))?;
            ids.push(id);
        }
        if ids.len() > max_len {
            return Err(Error::Data(format!("caption has {} tokens, limit is {max_len}", ids.len())));
        }
        let mut mask = vec![true; ids.len()];
        ids.resize(max_len, PAD_ID);
        mask.resize(max_len, false);
        Ok(TokenSeq { ids, mask })
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        seq.ids
            .iter()
            .zip(&seq.mask)
            .filter(|(_, &m)| m)
            .map(|(&i, _)| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

pub fn background_rgb(name: &str) -> Option<[f64; 3]> {
    BACKGROUNDS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

pub fn fill_template(template: &str, color: &str, shape: &str, background: &str) -> String {
    template.replace("{c}", color).replace("{s}", shape).replace("{b}", background)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_caption_is_all_pad() {
        let v = Vocabulary::standard();
        let t = v.tokenize("", 6).unwrap();
        assert_eq!(t.ids, vec![PAD_ID; 6]);
        assert!(t.mask.iter().all(|m| !m));
    }

    #[test]
    fn direct_lookup() {
        let v = Vocabulary::standard();
        let t = v.tokenize("red circle", 4).unwrap();
        assert_eq!(t.ids, vec![v.id("red").unwrap(), v.id("circle").unwrap(), PAD_ID, PAD_ID]);
        assert_eq!(t.mask, vec![true, true, false, false]);
    }

    #[test]
    fn out_of_vocabulary_is_a_data_error() {
        let v = Vocabulary::standard();
        assert!(matches!(v.tokenize("red zebra", 4), Err(Error::Data(_))));
        assert!(matches!(v.tokenize("<pad>", 4), Err(Error::Data(_))));
        assert!(matches!(v.tokenize("a a a a a", 4), Err(Error::Data(_))));
    }

    #[test]
    fn attribute_vocabularies_are_disjoint() {
        for (c, _) in COLORS {
            assert!(BACKGROUNDS.iter().all(|(b, _)| b != c));
            assert!(!SHAPES.contains(c));
        }
    }
}
