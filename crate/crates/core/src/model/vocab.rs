//! Closed word-level vocabulary shared by query generation and the sequence
//! model.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEG: u32 = 3;
pub const IMG_TGT: u32 = 4;
pub const IMG_REF: u32 = 5;

const WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", "<seg>", "<img_tgt>", "<img_ref>",
    // prompt template
    "user:", "can", "you", "segment", "the", "?", "assistant:",
    // answers
    "yes", ",", "it", "is", ".", "no", "target",
    // shapes
    "square", "circle", "triangle",
    // intensities
    "dark", "gray", "light", "white",
    // temporal reasoning
    "fastest", "shape", "that", "exits", "frame", "last", "enters", "latest",
];

/// Template words placed before the visual blocks.
pub const PROMPT_HEAD: &[&str] = &["user:"];
/// Template words between the visual blocks and the description.
pub const PROMPT_ASK: &[&str] = &["can", "you", "segment", "the"];
/// Template words after the description.
pub const PROMPT_TAIL: &[&str] = &["?", "assistant:"];

pub const POSITIVE_ANSWER: &str = "yes , it is <seg> .";
pub const NEGATIVE_ANSWER: &str = "no target .";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { words: WORDS.to_vec() }
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<u32> {
        self.words
            .iter()
            .position(|w| *w == word)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: u32) -> Option<&'static str> {
        self.words.get(id as usize).copied()
    }

    /// Lower-cases, splits punctuation off words and maps each word to its id.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let mut spaced = String::with_capacity(text.len() + 8);
        for ch in text.chars() {
            if matches!(ch, '?' | ',' | '.') {
                spaced.push(' ');
                spaced.push(ch);
                spaced.push(' ');
            } else {
                spaced.extend(ch.to_lowercase());
            }
        }
        spaced.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&id| self.word(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Answer tokens (terminated by EOS) for a positive or negative query.
    pub fn answer(&self, positive: bool) -> Vec<u32> {
        let text = if positive { POSITIVE_ANSWER } else { NEGATIVE_ANSWER };
        let mut ids = self.tokenize(text).expect("answer words are in the vocabulary");
        ids.push(EOS);
        ids
    }

    pub fn words_to_ids(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id(w).expect("template word")).collect()
    }
}
