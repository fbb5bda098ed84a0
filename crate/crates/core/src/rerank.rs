//! Layerwise reranking with maximum-similarity early exit.
//!
//! The first batch of candidates is scored at a shallow layer. If the
//! softmax over that batch is confident enough, every candidate is scored at
//! the shallow layer; otherwise the whole list is scored at the deep layer.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::BackendError;
use crate::hit::ScoredHit;
use crate::tokenize::Tokenizer;

pub const DEFAULT_LAYERS: &[usize] = &[8, 12, 20, 28, 40];
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_RERANK_K: usize = 6;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("scorer failed: {0}")]
    Scorer(#[from] BackendError),
    #[error("scorer returned {got} scores for {expected} documents")]
    ScoreCount { expected: usize, got: usize },
    #[error("scorer returned a non-finite score")]
    NonFinite,
    #[error("invalid early-exit policy: {0}")]
    Policy(String),
}

impl RerankError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, RerankError::Scorer(e) if e.is_unavailable())
    }
}

/// A cross-scorer that can emit relevance scores from intermediate layers.
pub trait LayerwiseScorer: Send + Sync {
    fn available_layers(&self) -> &[usize];

    /// Raw relevance of each document to the query at `layer`.
    fn score(&self, query: &str, documents: &[String], layer: usize)
        -> Result<Vec<f64>, BackendError>;

    /// Last known reachability; `None` if never contacted.
    fn reachable(&self) -> Option<bool> {
        Some(true)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    #[default]
    Off,
    MaxSimilarity,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyExitPolicy {
    pub mode: ExitMode,
    pub shallow_layer: usize,
    pub deep_layer: usize,
    pub threshold: f64,
}

impl Default for EarlyExitPolicy {
    fn default() -> Self {
        Self {
            mode: ExitMode::Off,
            shallow_layer: 12,
            deep_layer: 28,
            threshold: 0.4,
        }
    }
}

impl EarlyExitPolicy {
    pub fn max_similarity(threshold: f64) -> Self {
        Self {
            mode: ExitMode::MaxSimilarity,
            threshold,
            ..Self::default()
        }
    }

    pub fn entropy(threshold: f64) -> Self {
        Self {
            mode: ExitMode::Entropy,
            threshold,
            ..Self::default()
        }
    }

    pub fn validate(&self, layers: &[usize]) -> Result<(), RerankError> {
        if !layers.contains(&self.deep_layer) {
            return Err(RerankError::Policy(format!(
                "deep layer {} not offered by scorer",
                self.deep_layer
            )));
        }
        if self.mode == ExitMode::Off {
            return Ok(());
        }
        if self.shallow_layer >= self.deep_layer {
            return Err(RerankError::Policy(format!(
                "shallow layer {} must be below deep layer {}",
                self.shallow_layer, self.deep_layer
            )));
        }
        if !layers.contains(&self.shallow_layer) {
            return Err(RerankError::Policy(format!(
                "shallow layer {} not offered by scorer",
                self.shallow_layer
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(RerankError::Policy(format!(
                "threshold {} outside [0, 1]",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Numerically stable softmax.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// True iff the largest softmax probability over the batch exceeds `threshold`.
pub fn early_exit_decision(first_batch: &[f64], threshold: f64) -> bool {
    if first_batch.is_empty() {
        return false;
    }
    softmax(first_batch)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
        > threshold
}

/// Shannon entropy of the softmax divided by `ln(n)`; a single-element batch
/// counts as fully certain (0).
pub fn normalized_entropy(scores: &[f64]) -> f64 {
    if scores.len() <= 1 {
        return 0.0;
    }
    let h: f64 = softmax(scores)
        .into_iter()
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h / (scores.len() as f64).ln()
}

/// True iff the normalized entropy of the batch is strictly below `threshold`.
pub fn entropy_exit_decision(first_batch: &[f64], threshold: f64) -> bool {
    !first_batch.is_empty() && normalized_entropy(first_batch) < threshold
}

#[derive(Debug, Clone)]
pub struct RerankCandidate {
    pub hit: ScoredHit,
    /// Document text handed to the scorer (already expanded).
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RerankParams {
    pub k: usize,
    pub batch_size: usize,
}

impl Default for RerankParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_RERANK_K,
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub hits: Vec<ScoredHit>,
    /// Layer the final scores came from.
    pub layer: usize,
    pub exited_early: bool,
    /// Number of scorer calls made at the deep layer.
    pub deep_calls: usize,
}

fn score_batch(
    scorer: &dyn LayerwiseScorer,
    query: &str,
    batch: &[String],
    layer: usize,
) -> Result<Vec<f64>, RerankError> {
    let scores = scorer.score(query, batch, layer)?;
    if scores.len() != batch.len() {
        return Err(RerankError::ScoreCount {
            expected: batch.len(),
            got: scores.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(RerankError::NonFinite);
    }
    Ok(scores)
}

/// Rerank `candidates` (in coarse order) and return the top `params.k`.
/// Ties keep coarse order.
pub fn rerank(
    query: &str,
    candidates: &[RerankCandidate],
    params: RerankParams,
    scorer: &dyn LayerwiseScorer,
    policy: &EarlyExitPolicy,
) -> Result<RerankOutcome, RerankError> {
    policy.validate(scorer.available_layers())?;
    let batch_size = params.batch_size.max(1);
    if candidates.is_empty() {
        return Ok(RerankOutcome {
            hits: Vec::new(),
            layer: policy.deep_layer,
            exited_early: false,
            deep_calls: 0,
        });
    }
    let texts: Vec<String> = candidates.iter().map(|c| c.text.clone()).collect();
    let batches: Vec<&[String]> = texts.chunks(batch_size).collect();

    let mut scores: Vec<f64> = Vec::with_capacity(texts.len());
    let mut deep_calls = 0;
    let mut exited_early = false;
    let mut layer = policy.deep_layer;

    if policy.mode != ExitMode::Off {
        let first = score_batch(scorer, query, batches[0], policy.shallow_layer)?;
        exited_early = match policy.mode {
            ExitMode::MaxSimilarity => early_exit_decision(&first, policy.threshold),
            ExitMode::Entropy => entropy_exit_decision(&first, policy.threshold),
            ExitMode::Off => unreachable!(),
        };
        if exited_early {
            layer = policy.shallow_layer;
            scores.extend(first);
            for batch in &batches[1..] {
                scores.extend(score_batch(scorer, query, batch, layer)?);
            }
        }
    }
    if !exited_early {
        for batch in &batches {
            scores.extend(score_batch(scorer, query, batch, layer)?);
            deep_calls += 1;
        }
    }

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let hits = order
        .into_iter()
        .take(params.k)
        .enumerate()
        .map(|(i, idx)| ScoredHit {
            score: scores[idx],
            rank: i + 1,
            ..candidates[idx].hit.clone()
        })
        .collect();
    Ok(RerankOutcome {
        hits,
        layer,
        exited_early,
        deep_calls,
    })
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic lexical scorer: fraction of distinct query tokens present
/// in the document, scaled into a logit-like range. Identical at every
/// layer, so any early-exit policy reproduces the deep ranking.
#[derive(Debug, Clone)]
pub struct LexicalScorer {
    tokenizer: Tokenizer,
    layers: Vec<usize>,
}

impl LexicalScorer {
    pub fn new(tokenizer: Tokenizer) -> Self {
        Self {
            tokenizer,
            layers: DEFAULT_LAYERS.to_vec(),
        }
    }

    fn relevance(&self, query: &[String], document: &str) -> f64 {
        if query.is_empty() {
            return 0.0;
        }
        let doc: std::collections::HashSet<String> =
            self.tokenizer.tokenize(document).into_iter().collect();
        let mut distinct: Vec<&String> = query.iter().collect();
        distinct.sort();
        distinct.dedup();
        let matched = distinct.iter().filter(|t| doc.contains(t.as_str())).count();
        10.0 * matched as f64 / distinct.len() as f64
    }
}

impl LayerwiseScorer for LexicalScorer {
    fn available_layers(&self) -> &[usize] {
        &self.layers
    }

    fn score(&self, query: &str, documents: &[String], _layer: usize) -> Result<Vec<f64>, BackendError> {
        let q = self.tokenizer.tokenize(query);
        Ok(documents.iter().map(|d| self.relevance(&q, d)).collect())
    }
}

/// Every document gets the same score at every layer.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    layers: Vec<usize>,
}

impl Default for UniformScorer {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS.to_vec(),
        }
    }
}

impl LayerwiseScorer for UniformScorer {
    fn available_layers(&self) -> &[usize] {
        &self.layers
    }

    fn score(&self, _query: &str, documents: &[String], _layer: usize) -> Result<Vec<f64>, BackendError> {
        Ok(vec![0.0; documents.len()])
    }
}

/// Lexical relevance plus hashed per-(query, document, layer) noise whose
/// amplitude shrinks with depth, and a query-dependent sharpness. Shallow
/// layers disagree with deep ones and the confidence of the first batch
/// varies from query to query.
#[derive(Debug, Clone)]
pub struct NoisyLayerScorer {
    inner: LexicalScorer,
    noise: f64,
}

impl NoisyLayerScorer {
    pub fn new(tokenizer: Tokenizer, noise: f64) -> Self {
        Self {
            inner: LexicalScorer::new(tokenizer),
            noise,
        }
    }
}

impl LayerwiseScorer for NoisyLayerScorer {
    fn available_layers(&self) -> &[usize] {
        &self.inner.layers
    }

    fn score(&self, query: &str, documents: &[String], layer: usize) -> Result<Vec<f64>, BackendError> {
        let q = self.inner.tokenizer.tokenize(query);
        let sharpness = 0.1 + (fnv1a(&[query.as_bytes()]) % 1000) as f64 / 1000.0;
        let depth = 40.0 / layer.max(1) as f64;
        Ok(documents
            .iter()
            .map(|d| {
                let h = fnv1a(&[query.as_bytes(), d.as_bytes(), &layer.to_le_bytes()]);
                let unit = (h % 10_000) as f64 / 10_000.0 - 0.5;
                sharpness * self.inner.relevance(&q, d) + self.noise * depth * unit
            })
            .collect())
    }
}

/// Scorer backend reached over HTTP.
///
/// Request: `POST {url}` with `{"query": str, "documents": [str], "layer": int}`.
/// Response: `{"scores": [float]}` aligned with `documents`.
pub struct HttpScorer {
    url: String,
    layers: Vec<usize>,
    client: reqwest::blocking::Client,
    status: crate::backend::Reachability,
}

impl HttpScorer {
    pub fn new(url: impl Into<String>, layers: Vec<usize>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            layers,
            client,
            status: Default::default(),
        })
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    documents: &'a [String],
    layer: usize,
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

impl LayerwiseScorer for HttpScorer {
    fn available_layers(&self) -> &[usize] {
        &self.layers
    }

    fn score(&self, query: &str, documents: &[String], layer: usize) -> Result<Vec<f64>, BackendError> {
        let body = ScoreRequest {
            query,
            documents,
            layer,
        };
        let result = crate::backend::post_json::<_, ScoreResponse>(&self.client, &self.url, None, &body)
            .map(|r| r.scores);
        self.status.record(&result);
        result
    }

    fn reachable(&self) -> Option<bool> {
        self.status.get()
    }
}
