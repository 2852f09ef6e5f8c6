//! Caption tokenization and hashed-vocabulary embeddings.
//!
//! Captions are lowercased, split on whitespace and each word is hashed
//! into `1..vocab`; id 0 is the start token that begins every sequence.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::hash::Hasher;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{init_normal, Bound, ParamStore};
use crate::random::Rng;
use crate::tensor::Tensor;

/// Longest token sequence, start token included.
pub const MAX_TOKENS: usize = 32;
pub const START_TOKEN: usize = 0;

/// Training caption layout: domain, a tab, then the description.
pub fn format_caption(domain: &str, description: &str) -> String {
    format!("{domain}\t{description}")
}

pub fn hash_word(word: &str, vocab: usize) -> usize {
    let mut h = fnv::FnvHasher::default();
    h.write(word.as_bytes());
    1 + (h.finish() % (vocab as u64 - 1)) as usize
}

pub fn tokenize(caption: &str, vocab: usize) -> Vec<usize> {
    let lower = caption.to_lowercase();
    core::iter::once(START_TOKEN)
        .chain(lower.split_whitespace().map(|w| hash_word(w, vocab)))
        .take(MAX_TOKENS)
        .collect()
}

/// Embedding table `<prefix>.embed` of shape `[vocab, dim]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoder {
    pub prefix: String,
    pub vocab: usize,
    pub dim: usize,
}

impl TextEncoder {
    pub fn init(store: &mut ParamStore, prefix: impl Into<String>, vocab: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if vocab < 2 || dim == 0 {
            return Err(Error::Config(format!("text vocabulary {vocab} / dim {dim} too small")));
        }
        let enc = Self {
            prefix: prefix.into(),
            vocab,
            dim,
        };
        store.insert(enc.table_name(), init_normal(rng, &[vocab, dim], 1.0));
        Ok(enc)
    }

    fn table_name(&self) -> String {
        format!("{}.embed", self.prefix)
    }

    /// `[L, dim]` token embeddings for `caption`.
    pub fn embed<'t>(&self, p: &Bound<'t>, caption: &str) -> Result<Var<'t>> {
        p.get(&self.table_name())?.index_rows(&tokenize(caption, self.vocab))
    }

    pub fn encode_text(&self, params: &ParamStore, caption: &str) -> Result<Tensor> {
        let tape = crate::autodiff::Tape::new();
        let p = params.bind_frozen(&tape);
        Ok(self.embed(&p, caption)?.value())
    }
}
