//! Dense retrieval: embedding providers and an exhaustive cosine store.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{post_json, Reachability};
use crate::error::{BackendError, IndexError};
use crate::hit::{ExpansionMode, Route, ScoredHit, SourceFilter};
use crate::ingest::Chunk;
use crate::sparse::expand_document;
use crate::tokenize::Tokenizer;

pub const DEFAULT_DENSE_TOP_K: usize = 288;
pub const DEFAULT_HASH_DIM: usize = 256;
pub const QUERY_SLOT: &str = "{query}";
const EMBED_BATCH: usize = 64;
const SNAPSHOT_FORMAT: &str = "docqa-vectors";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DenseError {
    #[error("embedding batch {start}..{end} failed: {source}")]
    Batch {
        start: usize,
        end: usize,
        #[source]
        source: BackendError,
    },
    #[error("embedding query failed: {0}")]
    Query(BackendError),
    #[error("expected dimension {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

impl DenseError {
    pub fn is_unavailable(&self) -> bool {
        match self {
            DenseError::Batch { source, .. } => source.is_unavailable(),
            DenseError::Query(e) => e.is_unavailable(),
            DenseError::Dimension { .. } => false,
        }
    }
}

/// Text-to-vector model. Every returned vector has unit L2 norm.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_documents(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
    /// Embed a query after applying the provider's query template.
    fn embed_query(&self, query: &str) -> Result<Vec<f32>, BackendError>;
    fn reachable(&self) -> Option<bool> {
        Some(true)
    }
}

pub fn apply_query_template(template: &str, query: &str) -> String {
    template.replace(QUERY_SLOT, query)
}

/// Scale `v` to unit norm; a zero vector becomes the first basis vector.
pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic test embedder: a signed hashed bag of tokens, L2-normalized.
/// Empty input maps to the first basis vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    tokenizer: Tokenizer,
    dim: usize,
    query_template: String,
}

impl HashEmbedder {
    pub fn new(tokenizer: Tokenizer, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            tokenizer,
            dim,
            query_template: QUERY_SLOT.to_string(),
        }
    }

    pub fn with_query_template(mut self, template: impl Into<String>) -> Self {
        self.query_template = template.into();
        self
    }

    pub fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f32; self.dim];
        for token in self.tokenizer.tokenize(text) {
            let h = fnv1a(token.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        normalize(&mut v);
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Tokenizer::default(), DEFAULT_HASH_DIM)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_documents(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        Ok(texts.iter().map(|t| self.embed(t)).collect())
    }

    fn embed_query(&self, query: &str) -> Result<Vec<f32>, BackendError> {
        Ok(self.embed(&apply_query_template(&self.query_template, query)))
    }
}

/// Embedding backend reached over HTTP.
///
/// Request: `POST {url}` with `{"model": str, "input": [str]}`.
/// Response: either `{"data": [{"embedding": [float]}]}` or
/// `{"embeddings": [[float]]}`, aligned with `input`.
pub struct HttpEmbedder {
    url: String,
    model: String,
    dim: usize,
    query_template: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    status: Reachability,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedItem {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbedResponse {
    Data { data: Vec<EmbedItem> },
    Plain { embeddings: Vec<Vec<f32>> },
}

impl HttpEmbedder {
    pub fn new(
        url: impl Into<String>,
        model: impl Into<String>,
        dim: usize,
        query_template: impl Into<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            model: model.into(),
            dim,
            query_template: query_template.into(),
            api_key: None,
            client,
            status: Reachability::default(),
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    fn call(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = EmbedRequest {
            model: &self.model,
            input: texts,
        };
        let result = post_json::<_, EmbedResponse>(&self.client, &self.url, self.api_key.as_deref(), &body);
        self.status.record(&result);
        let mut vectors = match result? {
            EmbedResponse::Data { data } => data.into_iter().map(|d| d.embedding).collect::<Vec<_>>(),
            EmbedResponse::Plain { embeddings } => embeddings,
        };
        if vectors.len() != texts.len() {
            return Err(BackendError::Failed(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                vectors.len()
            )));
        }
        for v in &mut vectors {
            if v.len() != self.dim {
                return Err(BackendError::Failed(format!(
                    "embedding dimension {} != configured {}",
                    v.len(),
                    self.dim
                )));
            }
            normalize(v);
        }
        Ok(vectors)
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed_documents(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        self.call(texts)
    }

    fn embed_query(&self, query: &str) -> Result<Vec<f32>, BackendError> {
        let text = apply_query_template(&self.query_template, query);
        Ok(self.call(&[text])?.remove(0))
    }

    fn reachable(&self) -> Option<bool> {
        self.status.get()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VectorMeta {
    pub chunk_id: String,
    pub file_path: String,
    pub knowledge_path: String,
}

/// Row-major matrix of unit vectors with aligned chunk metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorStore {
    dim: usize,
    rows: Vec<f32>,
    meta: Vec<VectorMeta>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    #[serde(flatten)]
    store: VectorStore,
}

impl VectorStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn push(&mut self, vector: &[f32], meta: VectorMeta) -> Result<(), DenseError> {
        if vector.len() != self.dim {
            return Err(DenseError::Dimension {
                expected: self.dim,
                got: vector.len(),
            });
        }
        self.rows.extend_from_slice(vector);
        self.meta.push(meta);
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[VectorMeta] {
        &self.meta
    }

    /// Top `top_k` rows by cosine similarity among rows whose file path
    /// passes `filter`. Filtering happens before the cut. Ties keep row order.
    pub fn search(&self, query: &[f32], top_k: usize, filter: &SourceFilter) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| filter.allows(&self.meta[i].file_path))
            .map(|i| (i, dot(self.row(i), query)))
            .collect();
        if top_k < scored.len() {
            scored.select_nth_unstable_by(top_k, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            scored.truncate(top_k);
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            store: self.clone(),
        };
        let bytes = serde_json::to_vec(&snap).map_err(|e| IndexError::Snapshot(e.to_string()))?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path)?;
        let snap: Snapshot =
            serde_json::from_slice(&bytes).map_err(|e| IndexError::Snapshot(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(IndexError::Snapshot(format!(
                "unsupported snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        let store = snap.store;
        if store.rows.len() != store.dim * store.meta.len() {
            return Err(IndexError::Snapshot("row data does not match metadata".into()));
        }
        Ok(store)
    }
}

/// Embed every chunk (expanded per `mode`) into a new store.
pub fn index_chunks(
    chunks: &[Chunk],
    mode: ExpansionMode,
    provider: &dyn EmbeddingProvider,
) -> Result<VectorStore, DenseError> {
    let mut store = VectorStore::new(provider.dimension());
    for (b, batch) in chunks.chunks(EMBED_BATCH).enumerate() {
        let start = b * EMBED_BATCH;
        let texts: Vec<String> = batch.iter().map(|c| expand_document(c, mode)).collect();
        let vectors = provider
            .embed_documents(&texts)
            .map_err(|source| DenseError::Batch {
                start,
                end: start + batch.len(),
                source,
            })?;
        if vectors.len() != batch.len() {
            return Err(DenseError::Batch {
                start,
                end: start + batch.len(),
                source: BackendError::Failed(format!("got {} vectors", vectors.len())),
            });
        }
        for (chunk, v) in batch.iter().zip(vectors) {
            store.push(
                &v,
                VectorMeta {
                    chunk_id: chunk.chunk_id.clone(),
                    file_path: chunk.file_path.clone(),
                    knowledge_path: chunk.knowledge_path.clone(),
                },
            )?;
        }
    }
    Ok(store)
}

/// Dense route: embed the query and return the top `top_k` allowed chunks.
pub fn dense_retrieve(
    store: &VectorStore,
    provider: &dyn EmbeddingProvider,
    query: &str,
    top_k: usize,
    filter: &SourceFilter,
) -> Result<Vec<ScoredHit>, DenseError> {
    if store.is_empty() || top_k == 0 {
        return Ok(Vec::new());
    }
    let q = provider.embed_query(query).map_err(DenseError::Query)?;
    if q.len() != store.dimension() {
        return Err(DenseError::Dimension {
            expected: store.dimension(),
            got: q.len(),
        });
    }
    Ok(vector_hits(store, &q, top_k, filter))
}

/// Dense route for an already-embedded query vector.
pub fn vector_hits(store: &VectorStore, query: &[f32], top_k: usize, filter: &SourceFilter) -> Vec<ScoredHit> {
    store
        .search(query, top_k, filter)
        .into_iter()
        .enumerate()
        .map(|(i, (row, score))| ScoredHit {
            chunk_id: store.meta[row].chunk_id.clone(),
            score,
            rank: i + 1,
            route: Route::DenseRoute,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chunk(id: &str, file: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: id.into(),
            text: text.into(),
            char_span: (0, text.chars().count()),
            file_path: file.into(),
            knowledge_path: "K".into(),
            image_captions: vec![],
        }
    }

    fn norm(v: &[f32]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn hash_embedder_basics() {
        let e = HashEmbedder::default();
        let empty = e.embed("");
        assert_eq!(empty[0], 1.0);
        assert!((norm(&empty) - 1.0).abs() < 1e-6);
        assert_eq!(e.embed("基站 告警 处理"), e.embed("基站 告警 处理"));
        assert!((norm(&e.embed("alpha beta gamma")) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_tokens_raise_cosine() {
        let e = HashEmbedder::default();
        let a = e.embed("alpha beta gamma delta");
        let b = e.embed("alpha beta gamma omega");
        let c = e.embed("zeta eta theta iota");
        assert!(dot(&a, &b) > dot(&a, &c));
    }

    #[test]
    fn query_template_is_applied() {
        let e = HashEmbedder::default().with_query_template("search: {query}");
        assert_eq!(e.embed_query("alpha").unwrap(), e.embed("search: alpha"));
    }

    #[test]
    fn identical_row_is_rank_one() {
        let e = HashEmbedder::default();
        let chunks = vec![
            chunk("a", "x/a", "alpha beta"),
            chunk("b", "x/b", "gamma delta"),
            chunk("c", "y/c", "epsilon zeta"),
        ];
        let store = index_chunks(&chunks, ExpansionMode::None, &e).unwrap();
        assert_eq!(store.len(), 3);
        let hits = vector_hits(&store, store.row(1), 288, &SourceFilter::All);
        assert_eq!(hits[0].chunk_id, "b");
        assert!((hits[0].score - 1.0).abs() < 1e-6);
        assert_eq!(hits[0].route, Route::DenseRoute);
        assert!(index_chunks(&[], ExpansionMode::FilePath, &e).unwrap().is_empty());
    }

    #[test]
    fn filter_applies_before_cut() {
        let e = HashEmbedder::default();
        let chunks = vec![
            chunk("a", "drop/a", "alpha beta"),
            chunk("b", "keep/b", "alpha gamma"),
            chunk("c", "keep/c", "delta"),
        ];
        let store = index_chunks(&chunks, ExpansionMode::None, &e).unwrap();
        let filter = SourceFilter::Prefixes(vec!["keep/".into()]);
        let hits = dense_retrieve(&store, &e, "alpha beta", 2, &filter).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].chunk_id, "b");
    }

    #[test]
    fn snapshot_round_trip() {
        let e = HashEmbedder::default();
        let store = index_chunks(&[chunk("a", "f", "alpha"), chunk("b", "g", "beta")], ExpansionMode::FilePath, &e).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        store.write_snapshot(&p).unwrap();
        assert_eq!(VectorStore::read_snapshot(&p).unwrap(), store);
    }

    struct Broken;

    impl EmbeddingProvider for Broken {
        fn dimension(&self) -> usize {
            4
        }
        fn embed_documents(&self, _: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
            Err(BackendError::Unavailable("down".into()))
        }
        fn embed_query(&self, _: &str) -> Result<Vec<f32>, BackendError> {
            Err(BackendError::Unavailable("down".into()))
        }
    }

    #[test]
    fn provider_failure_names_batch() {
        let err = index_chunks(&[chunk("a", "f", "x")], ExpansionMode::None, &Broken).unwrap_err();
        assert!(matches!(err, DenseError::Batch { start: 0, end: 1, .. }));
        assert!(err.is_unavailable());
    }

    fn unit_rows(n: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f32>>> {
        prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), n)
            .prop_map(|rows| rows.into_iter().map(|mut r| { normalize(&mut r); r }).collect())
    }

    proptest! {
        #[test]
        fn search_matches_exhaustive_argsort(
            rows in (1usize..60).prop_flat_map(|n| unit_rows(n, 8)),
            q in unit_rows(1, 8),
            k in 1usize..70,
            mask in prop::collection::vec(any::<bool>(), 60),
        ) {
            let mut store = VectorStore::new(8);
            for (i, r) in rows.iter().enumerate() {
                let file = if mask[i] { format!("keep/{i}") } else { format!("drop/{i}") };
                store.push(r, VectorMeta { chunk_id: i.to_string(), file_path: file, knowledge_path: String::new() }).unwrap();
            }
            let filter = SourceFilter::Prefixes(vec!["keep/".into()]);
            let got = store.search(&q[0], k, &filter);

            let mut oracle: Vec<(usize, f64)> = rows
                .iter()
                .enumerate()
                .filter(|(i, _)| mask[*i])
                .map(|(i, r)| (i, r.iter().zip(&q[0]).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            oracle.truncate(k);
            prop_assert_eq!(got.len(), oracle.len());
            for (g, o) in got.iter().zip(&oracle) {
                prop_assert_eq!(g.0, o.0);
                prop_assert!((g.1 - o.1).abs() < 1e-12);
                prop_assert!(g.1 >= -1.0 - 1e-9 && g.1 <= 1.0 + 1e-9);
            }
        }
    }
}
