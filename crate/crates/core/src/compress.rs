//! Extractive context compression: keep the sentences of a chunk that score
//! highest against the query under BM25, within a character budget.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::ingest::{split_sentences, Chunk, SentenceTerminators};
use crate::sparse::{Bm25Index, Bm25Params};
use crate::tokenize::Tokenizer;

pub const DEFAULT_RATE: f64 = 0.5;
/// Compression rates offered as presets.
pub const PRESET_RATES: [f64; 2] = [0.5, 0.8];
/// Characters per token used when reporting token savings.
pub const CHARS_PER_TOKEN: f64 = 1.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompressionParams {
    pub rate: f64,
    pub min_sentences: usize,
}

impl Default for CompressionParams {
    fn default() -> Self {
        Self {
            rate: DEFAULT_RATE,
            min_sentences: 1,
        }
    }
}

impl CompressionParams {
    pub fn new(rate: f64) -> Result<Self, ConfigError> {
        let p = Self {
            rate,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "compression rate must be in (0, 1], got {}",
                self.rate
            )));
        }
        Ok(())
    }
}

/// Sentence indices in admission order: score descending, ties by position.
fn admission_order(query: &str, sentences: &[String], tokenizer: &Tokenizer) -> Vec<usize> {
    let corpus: Vec<(String, Vec<String>)> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| (i.to_string(), tokenizer.tokenize(s)))
        .collect();
    let scores = match Bm25Index::build(&corpus, Bm25Params::default()) {
        Ok(index) => index.score_all(&tokenizer.tokenize(query)),
        Err(_) => vec![0.0; sentences.len()],
    };
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Compress one chunk. Sentences are admitted greedily in score order while
/// the admitted total stays within `rate * len(text)` characters; the first
/// `min_sentences` are admitted regardless. Output keeps original order.
pub fn bm25_extract(query: &str, text: &str, params: &CompressionParams, tokenizer: &Tokenizer) -> String {
    let sentences: Vec<String> = split_sentences(text, &SentenceTerminators::default())
        .into_iter()
        .map(|s| s.text)
        .collect();
    if sentences.is_empty() {
        return String::new();
    }
    let budget = params.rate * text.chars().count() as f64;
    let mut admitted = vec![false; sentences.len()];
    let mut used = 0usize;
    for (n, idx) in admission_order(query, &sentences, tokenizer).into_iter().enumerate() {
        let len = sentences[idx].chars().count();
        if n >= params.min_sentences && (used + len) as f64 > budget {
            break;
        }
        admitted[idx] = true;
        used += len;
    }
    sentences
        .into_iter()
        .zip(admitted)
        .filter_map(|(s, keep)| keep.then_some(s))
        .collect()
}

/// Compress each chunk independently; metadata is left untouched.
pub fn compress_contexts(
    query: &str,
    chunks: &[Chunk],
    params: &CompressionParams,
    tokenizer: &Tokenizer,
) -> Vec<Chunk> {
    chunks
        .iter()
        .map(|c| Chunk {
            text: bm25_extract(query, &c.text, params, tokenizer),
            ..c.clone()
        })
        .collect()
}
