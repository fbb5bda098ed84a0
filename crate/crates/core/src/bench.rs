//! Synthetic corpora and timing for comparing the eager BM25 index with the
//! naive scorer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::IndexError;
use crate::sparse::{Bm25Index, Bm25Params, NaiveBm25};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub docs: usize,
    pub queries: usize,
    pub vocabulary: usize,
    pub doc_len: (usize, usize),
    pub query_len: (usize, usize),
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            docs: 10_000,
            queries: 1_000,
            vocabulary: 20_000,
            doc_len: (20, 120),
            query_len: (2, 8),
            seed: 7,
        }
    }
}

/// Term ids follow a Zipf-like law so a few terms are frequent and most are rare.
fn zipf_term(rng: &mut ChaCha8Rng, vocabulary: usize) -> String {
    let u: f64 = rng.gen_range(0.0..1.0);
    let id = ((vocabulary as f64).powf(u) - 1.0) as usize;
    format!("t{}", id.min(vocabulary - 1))
}

/// Deterministic corpus and query set for `spec`.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocabulary = spec.vocabulary.max(1);
    let sample = |range: (usize, usize), rng: &mut ChaCha8Rng| -> Vec<String> {
        let n = rng.gen_range(range.0..=range.1.max(range.0));
        (0..n).map(|_| zipf_term(rng, vocabulary)).collect()
    };
    let docs = (0..spec.docs).map(|_| sample(spec.doc_len, &mut rng)).collect();
    let queries = (0..spec.queries).map(|_| sample(spec.query_len, &mut rng)).collect();
    (docs, queries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub docs: usize,
    pub queries: usize,
    pub top_k: usize,
    pub build_eager_ms: f64,
    pub build_naive_ms: f64,
    pub query_eager_ms: f64,
    pub query_naive_ms: f64,
    /// Naive query time over eager query time.
    pub speedup: f64,
    /// Largest absolute score difference between the two top-k lists.
    pub max_abs_diff: f64,
}

/// Time `queries` top-k searches with both scorers over the same corpus.
pub fn bench_bm25(spec: &SyntheticSpec, top_k: usize, params: Bm25Params) -> Result<BenchReport, IndexError> {
    let (docs, queries) = synthetic_corpus(spec);
    let t = Instant::now();
    let corpus: Vec<(String, Vec<String>)> = docs
        .iter()
        .enumerate()
        .map(|(i, d)| (i.to_string(), d.clone()))
        .collect();
    let eager = Bm25Index::build(&corpus, params)?;
    let build_eager_ms = t.elapsed().as_secs_f64() * 1000.0;
    let t = Instant::now();
    let naive = NaiveBm25::new(&docs, params);
    let build_naive_ms = t.elapsed().as_secs_f64() * 1000.0;

    let t = Instant::now();
    let eager_hits: Vec<_> = queries.iter().map(|q| eager.search(q, top_k, 0.0)).collect();
    let query_eager_ms = t.elapsed().as_secs_f64() * 1000.0;
    let t = Instant::now();
    let naive_hits: Vec<_> = queries.iter().map(|q| naive.search(q, top_k)).collect();
    let query_naive_ms = t.elapsed().as_secs_f64() * 1000.0;

    let mut max_abs_diff: f64 = 0.0;
    for (e, n) in eager_hits.iter().zip(&naive_hits) {
        if e.len() != n.len() {
            max_abs_diff = f64::INFINITY;
            continue;
        }
        for (a, b) in e.iter().zip(n) {
            max_abs_diff = max_abs_diff.max((a.1 - b.1).abs());
        }
    }
    Ok(BenchReport {
        docs: spec.docs,
        queries: spec.queries,
        top_k,
        build_eager_ms,
        build_naive_ms,
        query_eager_ms,
        query_naive_ms,
        speedup: query_naive_ms / query_eager_ms.max(1e-9),
        max_abs_diff,
    })
}
