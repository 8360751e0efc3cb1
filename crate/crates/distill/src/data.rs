//! Prompt sets tokenized once, with a compact vocabulary and per-word token
//! runs so that shuffled variants need no re-tokenization.

use std::collections::{BTreeSet, HashMap};

use anatomy_core::{AnatomyError, MergeTable, Result, TokenSequence, PAD_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::permute::permutation;

/// Maps tokenizer ids onto `0..len`; 0 and 1 are the start and end markers.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    to_compact: HashMap<u32, u32>,
    original: Vec<u32>,
}

pub const SOT: u32 = 0;
pub const EOT: u32 = 1;

impl Vocabulary {
    fn new(table: &MergeTable) -> Self {
        let mut v = Vocabulary { to_compact: HashMap::new(), original: Vec::new() };
        v.intern(table.sot_id());
        v.intern(table.eot_id());
        v
    }

    fn intern(&mut self, id: u32) -> u32 {
        let next = self.original.len() as u32;
        *self.to_compact.entry(id).or_insert_with(|| {
            self.original.push(id);
            next
        })
    }

    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }

    pub fn compact(&self, id: u32) -> Option<u32> {
        self.to_compact.get(&id).copied()
    }

    pub fn original(&self, compact: u32) -> Option<u32> {
        self.original.get(compact as usize).copied()
    }

    /// Compact form of a tokenizer sequence; padding stays [`PAD_ID`].
    pub fn remap(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let mut ids = Vec::with_capacity(seq.ids.len());
        for (i, &id) in seq.ids.iter().enumerate() {
            if i >= seq.content_len {
                ids.push(PAD_ID);
                continue;
            }
            ids.push(self.compact(id).ok_or_else(|| {
                AnatomyError::Validation(format!("token id {id} is not in the compact vocabulary"))
            })?);
        }
        Ok(TokenSequence { ids, ..seq.clone() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub text: String,
    /// Compact token ids of each whitespace-separated word.
    pub words: Vec<Vec<u32>>,
}

impl Prompt {
    /// Start marker, the words in `order`, end marker, fitted to `context`
    /// the way the tokenizer fits it.
    pub fn pack(&self, order: &[usize], context: usize) -> TokenSequence {
        let mut ids = vec![SOT];
        for &w in order {
            ids.extend_from_slice(&self.words[w]);
        }
        ids.push(EOT);
        let mut dropped = 0;
        if ids.len() > context {
            dropped = ids.len() - context;
            ids.truncate(context - 1);
            ids.push(EOT);
        }
        let content_len = ids.len();
        ids.resize(context, PAD_ID);
        TokenSequence { ids, content_len, truncated: dropped > 0, dropped_tokens: dropped }
    }

    pub fn sequence(&self, context: usize) -> TokenSequence {
        let order: Vec<usize> = (0..self.words.len()).collect();
        self.pack(&order, context)
    }

    /// The sequence of `word_permute(text, seed)`.
    pub fn permuted(&self, seed: u64, context: usize) -> TokenSequence {
        self.pack(&permutation(self.words.len(), seed), context)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    pub vocab: Vocabulary,
    pub prompts: Vec<Prompt>,
    pub context: usize,
}

impl PromptSet {
    pub fn build<S: AsRef<str>>(table: &MergeTable, texts: &[S], context: usize) -> Result<Self> {
        if context < anatomy_core::tokenizer::MIN_CONTEXT {
            return Err(AnatomyError::InvalidArgument(format!("context must be >= 3, got {context}")));
        }
        if texts.is_empty() {
            return Err(AnatomyError::Validation("no prompts to distill on".into()));
        }
        let mut vocab = Vocabulary::new(table);
        let prompts = texts
            .iter()
            .map(|t| {
                let text = t.as_ref().to_string();
                let words = text
                    .split_whitespace()
                    .map(|w| table.content_ids(w).into_iter().map(|id| vocab.intern(id)).collect())
                    .collect();
                Prompt { text, words }
            })
            .collect();
        Ok(PromptSet { vocab, prompts, context })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

const COLORS: [&str; 12] = [
    "red", "blue", "green", "white", "black", "yellow", "orange", "purple", "brown", "gray", "pink", "silver",
];
const SIZES: [&str; 6] = ["small", "large", "tiny", "tall", "long", "short"];
const MATERIALS: [&str; 8] = ["wooden", "metal", "plastic", "glass", "leather", "cotton", "stone", "paper"];
const NOUNS: [&str; 30] = [
    "car", "dog", "cat", "shirt", "man", "woman", "chair", "table", "bottle", "cup", "bag", "hat", "bird",
    "horse", "bicycle", "boat", "lamp", "phone", "book", "umbrella", "shoe", "truck", "bench", "clock",
    "vase", "kite", "ball", "door", "window", "sign",
];
const PLACES: [&str; 10] =
    ["street", "table", "beach", "grass", "road", "wall", "floor", "shelf", "field", "window"];
const PREPS: [&str; 4] = ["on", "near", "under", "beside"];

/// `n` distinct attribute-noun prompts such as "small red car near the wall".
pub fn synthetic_prompts(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut words: Vec<&str> = Vec::new();
        if rng.random_bool(0.4) {
            words.push(SIZES[rng.random_range(0..SIZES.len())]);
        }
        if rng.random_bool(0.8) {
            words.push(COLORS[rng.random_range(0..COLORS.len())]);
        }
        if rng.random_bool(0.4) {
            words.push(MATERIALS[rng.random_range(0..MATERIALS.len())]);
        }
        words.push(NOUNS[rng.random_range(0..NOUNS.len())]);
        if rng.random_bool(0.35) {
            words.push(PREPS[rng.random_range(0..PREPS.len())]);
            words.push("the");
            words.push(PLACES[rng.random_range(0..PLACES.len())]);
        }
        let text = words.join(" ");
        if seen.insert(text.clone()) {
            out.push(text);
        }
    }
    out
}
