//! Rank fusion across retrieval routes.
//!
//! Coarse fusion (simple merge, RRF) combines candidate lists before
//! reranking; the answer-level strategies combine per-route answers.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hit::{rerank_positions, ScoredHit};

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("answer fusion needs at least one answer")]
    NoAnswers,
    #[error("rrf offset must be non-negative and finite, got {0}")]
    InvalidOffset(f64),
}

/// Fusion strategy, in the order the variants are usually compared:
/// coarse simple merge, coarse RRF, per-route rerank then RRF, and the two
/// per-route answer fusions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    #[default]
    SimpleMerge,
    Rrf,
    RerankRrf,
    AnswerLonger,
    AnswerConcat,
}

impl FusionStrategy {
    /// Whether routes are reranked separately before fusing.
    pub fn is_per_route(self) -> bool {
        matches!(
            self,
            FusionStrategy::RerankRrf | FusionStrategy::AnswerLonger | FusionStrategy::AnswerConcat
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub route: String,
    pub hits: Vec<ScoredHit>,
}

impl RankedList {
    pub fn new(route: impl Into<String>, hits: Vec<ScoredHit>) -> Self {
        Self {
            route: route.into(),
            hits,
        }
    }

    pub fn chunk_ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.chunk_id.as_str()).collect()
    }
}

/// Concatenate in route order keeping the first occurrence of every chunk.
pub fn simple_merge(lists: &[RankedList]) -> RankedList {
    let mut seen = HashSet::new();
    let mut hits: Vec<ScoredHit> = lists
        .iter()
        .flat_map(|l| l.hits.iter())
        .filter(|h| seen.insert(h.chunk_id.as_str()))
        .cloned()
        .collect();
    rerank_positions(&mut hits);
    RankedList::new("simple_merge", hits)
}

/// Reciprocal rank fusion: each list containing a chunk adds
/// `1 / (k_offset + rank)`. Ties go to the chunk first seen in an earlier
/// route, then at an earlier rank there.
pub fn rrf(lists: &[RankedList], k_offset: f64) -> Result<RankedList, FusionError> {
    if !(k_offset >= 0.0) || !k_offset.is_finite() {
        return Err(FusionError::InvalidOffset(k_offset));
    }
    struct Entry {
        hit: ScoredHit,
        fused: f64,
        first: (usize, usize),
    }
    let mut entries: Vec<Entry> = Vec::new();
    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (route_idx, list) in lists.iter().enumerate() {
        for hit in &list.hits {
            let term = 1.0 / (k_offset + hit.rank as f64);
            match by_id.get(hit.chunk_id.as_str()) {
                Some(&i) => entries[i].fused += term,
                None => {
                    by_id.insert(hit.chunk_id.as_str(), entries.len());
                    entries.push(Entry {
                        hit: hit.clone(),
                        fused: term,
                        first: (route_idx, hit.rank),
                    });
                }
            }
        }
    }
    entries.sort_by(|a, b| b.fused.total_cmp(&a.fused).then(a.first.cmp(&b.first)));
    let hits = entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| ScoredHit {
            score: e.fused,
            rank: i + 1,
            ..e.hit
        })
        .collect();
    Ok(RankedList::new("rrf", hits))
}

/// The longest answer by character count; ties keep the earlier route.
pub fn answer_fuse_longer<S: AsRef<str>>(answers: &[S]) -> Result<String, FusionError> {
    let mut best: Option<(&str, usize)> = None;
    for a in answers {
        let a = a.as_ref();
        let len = a.chars().count();
        if best.map_or(true, |(_, l)| len > l) {
            best = Some((a, len));
        }
    }
    best.map(|(a, _)| a.to_string()).ok_or(FusionError::NoAnswers)
}

/// All answers in route order separated by a blank line.
pub fn answer_fuse_concat<S: AsRef<str>>(answers: &[S]) -> Result<String, FusionError> {
    if answers.is_empty() {
        return Err(FusionError::NoAnswers);
    }
    Ok(answers
        .iter()
        .map(AsRef::as_ref)
        .collect::<Vec<_>>()
        .join("\n\n"))
}
