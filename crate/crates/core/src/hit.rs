use serde::{Deserialize, Serialize};

/// Retrieval route a hit originated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    ChunkRoute,
    PathRoute,
    DenseRoute,
}

impl Route {
    pub fn label(self) -> &'static str {
        match self {
            Route::ChunkRoute => "sparse_chunk",
            Route::PathRoute => "sparse_path",
            Route::DenseRoute => "dense",
        }
    }
}

/// A chunk reference with its score and 1-based rank within one result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHit {
    pub chunk_id: String,
    pub score: f64,
    pub rank: usize,
    pub route: Route,
}

/// Reassign ranks 1..n in the current order.
pub fn rerank_positions(hits: &mut [ScoredHit]) {
    for (i, hit) in hits.iter_mut().enumerate() {
        hit.rank = i + 1;
    }
}

/// Which path metadata, if any, is prepended to chunk text before scoring.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    #[default]
    None,
    FilePath,
    KnowledgePath,
}

/// Restricts hits to chunks whose file path starts with one of the prefixes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum SourceFilter {
    #[default]
    All,
    Prefixes(Vec<String>),
}

impl SourceFilter {
    pub fn from_config(prefixes: Option<&[String]>) -> Self {
        match prefixes {
            None => SourceFilter::All,
            Some(p) => SourceFilter::Prefixes(p.to_vec()),
        }
    }

    pub fn allows(&self, file_path: &str) -> bool {
        match self {
            SourceFilter::All => true,
            SourceFilter::Prefixes(prefixes) => prefixes.iter().any(|p| file_path.starts_with(p)),
        }
    }
}
