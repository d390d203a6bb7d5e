//! Prompt assembly: `<bos> user: [target block] [reference blocks] can you
//! segment the {query} ? assistant:`.

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::vocab::{Vocabulary, BOS, PROMPT_ASK, PROMPT_HEAD, PROMPT_TAIL};
use crate::video::Query;

/// Number of fixed text tokens around the image blocks and the query.
pub const TEMPLATE_LEN: usize = 1 + PROMPT_HEAD.len() + PROMPT_ASK.len() + PROMPT_TAIL.len();

/// One position of the mixed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Text(u32),
    /// Merged visual token `cell` of image block `block` (block 0 is the
    /// target frame).
    Image { block: usize, cell: usize },
}

/// Tokens of one frame plus its normalized time `t / (T - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualBlock {
    pub tokens: Tensor,
    pub time: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prompt {
    pub slots: Vec<Slot>,
    /// Target block first, then references in frame order.
    pub blocks: Vec<VisualBlock>,
}

impl Prompt {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Slot layout for `blocks` image blocks of `tokens` cells each.
pub fn prompt_slots(tokens: usize, blocks: usize, query: &[u32], vocab: &Vocabulary) -> Vec<Slot> {
    let mut slots = vec![Slot::Text(BOS)];
    slots.extend(vocab.words_to_ids(PROMPT_HEAD).into_iter().map(Slot::Text));
    for block in 0..blocks {
        slots.extend((0..tokens).map(|cell| Slot::Image { block, cell }));
    }
    slots.extend(vocab.words_to_ids(PROMPT_ASK).into_iter().map(Slot::Text));
    slots.extend(query.iter().map(|&id| Slot::Text(id)));
    slots.extend(vocab.words_to_ids(PROMPT_TAIL).into_iter().map(Slot::Text));
    slots
}

/// Builds the prompt for a target block and its references. The length is
/// `L * (1 + T_r) + TEMPLATE_LEN + |query|`.
pub fn build_prompt(target: VisualBlock, references: Vec<VisualBlock>, query: &Query, vocab: &Vocabulary) -> Result<Prompt> {
    let (l, d) = (target.tokens.rows, target.tokens.cols);
    for r in &references {
        if (r.tokens.rows, r.tokens.cols) != (l, d) {
            return Err(Error::dims(format!("{l}x{d} reference tokens"), format!("{}x{}", r.tokens.rows, r.tokens.cols)));
        }
    }
    let slots = prompt_slots(l, 1 + references.len(), &query.tokens, vocab);
    let mut blocks = Vec::with_capacity(1 + references.len());
    blocks.push(target);
    blocks.extend(references);
    Ok(Prompt { slots, blocks })
}
