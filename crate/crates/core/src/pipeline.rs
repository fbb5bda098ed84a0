//! Declarative pipeline: configuration, index lifecycle, query execution
//! and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::compress::{compress_contexts, CompressionParams, CHARS_PER_TOKEN};
use crate::dense::{dense_retrieve, index_chunks, EmbeddingProvider, HashEmbedder, HttpEmbedder, VectorStore, DEFAULT_DENSE_TOP_K, DEFAULT_HASH_DIM, QUERY_SLOT};
use crate::error::{BackendError, ConfigError, IndexError};
use crate::fusion::{answer_fuse_concat, answer_fuse_longer, rrf, simple_merge, FusionError, FusionStrategy, RankedList};
use crate::hit::{rerank_positions, ExpansionMode, Route, ScoredHit, SourceFilter};
use crate::ingest::{
    ingest_package, Backends as IngestBackends, Chunk, ChunkStore, ChunkingParams, ImageFilter, ImageFilterConfig,
    IngestError, IngestOptions, Package, SidecarText,
};
use crate::qa::{
    builtin_few_shot, document_concat, expand_query, generate_answer, hyde, integrate_answer, join_query, load_few_shot,
    AnswerMerge, ChatClient, FewShotExample, GenerationParams, HttpChatClient, HydeMode, HydeUsage, MockChatClient,
    QaError, QaTemplate, RewriteArtifacts, TemplateSet,
};
use crate::rerank::{
    rerank, EarlyExitPolicy, ExitMode, HttpScorer, LayerwiseScorer, LexicalScorer, RerankCandidate, RerankError,
    RerankParams, DEFAULT_BATCH_SIZE, DEFAULT_LAYERS, DEFAULT_RERANK_K,
};
use crate::sparse::{build_chunk_index, chunk_route, filter_by_source, Bm25Index, Bm25Params, PathIndex, DEFAULT_CHUNK_TOP_K, DEFAULT_PATH_TOP_K};
use crate::tokenize::{load_dictionary, load_stopwords, Tokenizer, TokenizerConfig};

const INDEX_MANIFEST: &str = "index.json";
const PATH_SNAPSHOT: &str = "sparse_path.json";
const INDEX_FORMAT: &str = "docqa-index";
const INDEX_VERSION: u32 = 1;

/// Top-level config sections a per-request override may touch. The rest
/// shape the indexes and need a rebuild.
pub const OVERRIDABLE_SECTIONS: &[&str] = &[
    "routes",
    "fusion",
    "rerank",
    "rewrite",
    "compress",
    "template",
    "answer_merge",
    "generation",
    "allowed_file_prefixes",
];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("stage {stage}: {message}")]
    Stage {
        stage: String,
        message: String,
        unavailable: bool,
    },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
}

impl PipelineError {
    fn stage(stage: impl Into<String>, message: impl ToString, unavailable: bool) -> Self {
        PipelineError::Stage {
            stage: stage.into(),
            message: message.to_string(),
            unavailable,
        }
    }

    pub fn is_unavailable(&self) -> bool {
        matches!(self, PipelineError::Stage { unavailable: true, .. })
    }

    pub fn stage_tag(&self) -> &str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::Ingest(_) => "ingest",
            PipelineError::Index(_) => "index",
            PipelineError::Stage { stage, .. } => stage,
            PipelineError::EmptyEvalSet => "eval",
        }
    }
}

impl From<QaError> for PipelineError {
    fn from(e: QaError) -> Self {
        let unavailable = e.is_unavailable();
        PipelineError::stage(e.stage(), e, unavailable)
    }
}

impl From<RerankError> for PipelineError {
    fn from(e: RerankError) -> Self {
        let unavailable = e.is_unavailable();
        PipelineError::stage("rerank", e, unavailable)
    }
}

impl From<FusionError> for PipelineError {
    fn from(e: FusionError) -> Self {
        PipelineError::stage("fusion", e, false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteKind {
    SparseChunk,
    SparsePath,
    Dense,
}

impl RouteKind {
    pub fn label(self) -> &'static str {
        self.route().label()
    }

    pub fn route(self) -> Route {
        match self {
            RouteKind::SparseChunk => Route::ChunkRoute,
            RouteKind::SparsePath => Route::PathRoute,
            RouteKind::Dense => Route::DenseRoute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouteSettings {
    pub top_k: usize,
    pub expansion: ExpansionMode,
}

/// Route parameters plus the enabled routes in priority order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutesConfig {
    pub order: Vec<RouteKind>,
    pub sparse_chunk: RouteSettings,
    pub sparse_path: RouteSettings,
    pub dense: RouteSettings,
}

impl Default for RoutesConfig {
    fn default() -> Self {
        Self {
            order: vec![RouteKind::SparseChunk, RouteKind::SparsePath],
            sparse_chunk: RouteSettings {
                top_k: DEFAULT_CHUNK_TOP_K,
                expansion: ExpansionMode::KnowledgePath,
            },
            sparse_path: RouteSettings {
                top_k: DEFAULT_PATH_TOP_K,
                expansion: ExpansionMode::None,
            },
            dense: RouteSettings {
                top_k: DEFAULT_DENSE_TOP_K,
                expansion: ExpansionMode::FilePath,
            },
        }
    }
}

impl RoutesConfig {
    pub fn settings(&self, kind: RouteKind) -> RouteSettings {
        match kind {
            RouteKind::SparseChunk => self.sparse_chunk,
            RouteKind::SparsePath => self.sparse_path,
            RouteKind::Dense => self.dense,
        }
    }
}

impl Default for RouteSettings {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_CHUNK_TOP_K,
            expansion: ExpansionMode::None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub rrf_k: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::SimpleMerge,
            rrf_k: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankConfig {
    pub enabled: bool,
    pub k: usize,
    pub expansion: ExpansionMode,
    pub batch_size: usize,
    pub policy: ExitMode,
    pub shallow_layer: usize,
    pub deep_layer: usize,
    pub threshold: f64,
}

impl Default for RerankConfig {
    fn default() -> Self {
        let p = EarlyExitPolicy::default();
        Self {
            enabled: true,
            k: DEFAULT_RERANK_K,
            expansion: ExpansionMode::FilePath,
            batch_size: DEFAULT_BATCH_SIZE,
            policy: p.mode,
            shallow_layer: p.shallow_layer,
            deep_layer: p.deep_layer,
            threshold: p.threshold,
        }
    }
}

impl RerankConfig {
    pub fn policy(&self) -> EarlyExitPolicy {
        EarlyExitPolicy {
            mode: self.policy,
            shallow_layer: self.shallow_layer,
            deep_layer: self.deep_layer,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewriteConfig {
    pub expansion: bool,
    pub hyde: HydeMode,
    pub hyde_usage: HydeUsage,
    pub few_shot_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressConfig {
    pub enabled: bool,
    pub rate: f64,
    pub min_sentences: usize,
}

impl Default for CompressConfig {
    fn default() -> Self {
        let p = CompressionParams::default();
        Self {
            enabled: false,
            rate: p.rate,
            min_sentences: p.min_sentences,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub max_documents: usize,
    pub include_image_captions: bool,
    pub temperature: f64,
    pub max_tokens: u32,
    pub template_dir: Option<PathBuf>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let g = GenerationParams::default();
        Self {
            max_documents: g.max_documents,
            include_image_captions: g.include_image_captions,
            temperature: g.temperature,
            max_tokens: g.max_tokens,
            template_dir: None,
        }
    }
}

impl GenerationConfig {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            max_documents: self.max_documents,
            include_image_captions: self.include_image_captions,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerSettings {
    pub dictionary: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub builtin_stopwords: bool,
}

impl Default for TokenizerSettings {
    fn default() -> Self {
        Self {
            dictionary: None,
            stopwords: None,
            builtin_stopwords: true,
        }
    }
}

impl TokenizerSettings {
    pub fn build(&self) -> Result<Tokenizer, ConfigError> {
        let mut config = TokenizerConfig::default();
        if self.builtin_stopwords {
            config = config.with_builtin_stopwords();
        }
        if let Some(path) = &self.dictionary {
            config.dictionary = load_dictionary(path)?;
        }
        if let Some(path) = &self.stopwords {
            config.stopwords.extend(load_stopwords(path)?);
        }
        config.validate()?;
        Ok(Tokenizer::new(config))
    }
}

/// Every stage setting. Defaults reproduce the best-performing setup: two
/// sparse routes merged, 28-layer rerank to 6 documents, the normal
/// template and the top-1 document appended to the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub routes: RoutesConfig,
    pub fusion: FusionConfig,
    pub rerank: RerankConfig,
    pub rewrite: RewriteConfig,
    pub compress: CompressConfig,
    pub template: QaTemplate,
    pub answer_merge: AnswerMerge,
    pub generation: GenerationConfig,
    pub allowed_file_prefixes: Option<Vec<String>>,
    pub tokenizer: TokenizerSettings,
    pub bm25: Bm25Params,
    pub chunking: ChunkingParams,
    pub images: ImageFilterConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            routes: RoutesConfig::default(),
            fusion: FusionConfig::default(),
            rerank: RerankConfig::default(),
            rewrite: RewriteConfig::default(),
            compress: CompressConfig::default(),
            template: QaTemplate::Normal,
            answer_merge: AnswerMerge::DocumentConcat,
            generation: GenerationConfig::default(),
            allowed_file_prefixes: None,
            tokenizer: TokenizerSettings::default(),
            bm25: Bm25Params::default(),
            chunking: ChunkingParams::default(),
            images: ImageFilterConfig::default(),
        }
    }
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_json(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Load a TOML config; relative file paths inside it resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let mut config = Self::from_toml_str(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.tokenizer.dictionary);
        fix(&mut self.tokenizer.stopwords);
        fix(&mut self.rewrite.few_shot_file);
        fix(&mut self.generation.template_dir);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.routes.order.is_empty() {
            return Err(invalid("at least one retrieval route must be enabled"));
        }
        let mut seen = self.routes.order.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.routes.order.len() {
            return Err(invalid("routes.order lists a route twice"));
        }
        if !(self.fusion.rrf_k >= 0.0 && self.fusion.rrf_k.is_finite()) {
            return Err(invalid(format!("fusion.rrf_k must be >= 0, got {}", self.fusion.rrf_k)));
        }
        if self.rerank.k == 0 || self.rerank.batch_size == 0 {
            return Err(invalid("rerank.k and rerank.batch_size must be positive"));
        }
        if self.generation.max_documents == 0 {
            return Err(invalid("generation.max_documents must be positive"));
        }
        CompressionParams {
            rate: self.compress.rate,
            min_sentences: self.compress.min_sentences,
        }
        .validate()?;
        self.bm25
            .validate()
            .map_err(|e| invalid(e.to_string()))?;
        self.chunking.validate()?;
        Ok(())
    }

    /// A copy with `overrides` (a partial config object) merged in. Only
    /// the sections in [`OVERRIDABLE_SECTIONS`] may appear; unknown fields
    /// are rejected.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self, ConfigError> {
        let obj = match overrides {
            serde_json::Value::Null => return Ok(self.clone()),
            serde_json::Value::Object(o) => o,
            _ => return Err(invalid("overrides must be an object")),
        };
        if let Some(key) = obj.keys().find(|k| !OVERRIDABLE_SECTIONS.contains(&k.as_str())) {
            return Err(invalid(format!("override of {key:?} is not allowed per request")));
        }
        let mut merged = serde_json::to_value(self).map_err(|e| invalid(e.to_string()))?;
        merge_json(&mut merged, overrides);
        let config: Self = serde_json::from_value(merged).map_err(|e| invalid(format!("overrides: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    /// Short stable hash of the full configuration.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&bytes)[..8])
    }

    /// Hash of the settings that shape index contents.
    pub fn index_fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(&(&self.tokenizer, &self.bm25, &self.chunking, &self.images))
            .expect("config serializes");
        hex(&Sha256::digest(&bytes)[..8])
    }

    pub fn source_filter(&self) -> SourceFilter {
        SourceFilter::from_config(self.allowed_file_prefixes.as_deref())
    }

    pub fn compression(&self) -> CompressionParams {
        CompressionParams {
            rate: self.compress.rate,
            min_sentences: self.compress.min_sentences,
        }
    }

    fn needs_dense(&self) -> bool {
        self.routes.order.contains(&RouteKind::Dense)
    }
}

/// Model backends used at query time.
#[derive(Clone)]
pub struct Backends {
    pub chat: Arc<dyn ChatClient>,
    pub embedder: Arc<dyn EmbeddingProvider>,
    pub scorer: Arc<dyn LayerwiseScorer>,
}

pub const ENV_EMBED_URL: &str = "RAG_EMBED_URL";
pub const ENV_EMBED_MODEL: &str = "RAG_EMBED_MODEL";
pub const ENV_EMBED_DIM: &str = "RAG_EMBED_DIM";
pub const ENV_EMBED_QUERY_TEMPLATE: &str = "RAG_EMBED_QUERY_TEMPLATE";
pub const ENV_EMBED_KEY: &str = "RAG_EMBED_KEY";
pub const ENV_SCORER_URL: &str = "RAG_SCORER_URL";
pub const ENV_SCORER_LAYERS: &str = "RAG_SCORER_LAYERS";

impl Backends {
    /// Deterministic offline backends.
    pub fn mock(tokenizer: &Tokenizer) -> Self {
        Self {
            chat: Arc::new(MockChatClient::new()),
            embedder: Arc::new(HashEmbedder::new(tokenizer.clone(), DEFAULT_HASH_DIM)),
            scorer: Arc::new(LexicalScorer::new(tokenizer.clone())),
        }
    }

    /// HTTP backends for every service with a configured URL; the others
    /// fall back to the offline implementations. Returns notes describing
    /// each fallback.
    pub fn from_env(tokenizer: &Tokenizer) -> Result<(Self, Vec<String>), BackendError> {
        let env = |k: &str| std::env::var(k).ok().filter(|v| !v.trim().is_empty());
        let mut backends = Self::mock(tokenizer);
        let mut notes = Vec::new();
        match HttpChatClient::from_env() {
            Some(client) => backends.chat = Arc::new(client?),
            None => notes.push("chat: no RAG_CHAT_URL, using the mock client".to_string()),
        }
        match env(ENV_EMBED_URL) {
            Some(url) => {
                let dim = env(ENV_EMBED_DIM)
                    .map(|d| d.parse::<usize>())
                    .transpose()
                    .map_err(|e| BackendError::Failed(format!("{ENV_EMBED_DIM}: {e}")))?
                    .unwrap_or(1024);
                let model = env(ENV_EMBED_MODEL).unwrap_or_else(|| "default".into());
                let template = env(ENV_EMBED_QUERY_TEMPLATE).unwrap_or_else(|| QUERY_SLOT.into());
                backends.embedder =
                    Arc::new(HttpEmbedder::new(url, model, dim, template)?.with_api_key(env(ENV_EMBED_KEY)));
            }
            None => notes.push("embedder: no RAG_EMBED_URL, using the hashed test embedder".to_string()),
        }
        match env(ENV_SCORER_URL) {
            Some(url) => {
                let layers = match env(ENV_SCORER_LAYERS) {
                    Some(list) => list
                        .split(',')
                        .map(|l| l.trim().parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| BackendError::Failed(format!("{ENV_SCORER_LAYERS}: {e}")))?,
                    None => DEFAULT_LAYERS.to_vec(),
                };
                backends.scorer = Arc::new(HttpScorer::new(url, layers)?);
            }
            None => notes.push("scorer: no RAG_SCORER_URL, using the lexical scorer".to_string()),
        }
        Ok((backends, notes))
    }

    pub fn reachability(&self) -> BTreeMap<String, Option<bool>> {
        BTreeMap::from([
            ("chat".to_string(), self.chat.reachable()),
            ("embedder".to_string(), self.embedder.reachable()),
            ("scorer".to_string(), self.scorer.reachable()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextHit {
    pub chunk_id: String,
    pub text: String,
    pub score: f64,
    pub rank: usize,
    pub route: String,
    pub file_path: String,
    pub knowledge_path: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_captions: Vec<String>,
}

/// Chunk ids produced by one stage, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageList {
    pub stage: String,
    pub chunk_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankInfo {
    pub route: String,
    pub layer: usize,
    pub exited_early: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub question: String,
    pub answer: String,
    pub contexts: Vec<ContextHit>,
    pub rewrite: RewriteArtifacts,
    pub stages: Vec<StageList>,
    pub rerank: Vec<RerankInfo>,
    /// Milliseconds per stage, plus `total`.
    pub timings: BTreeMap<String, f64>,
    pub fingerprint: String,
    pub warnings: Vec<String>,
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1000.0
}

fn mode_slot(mode: ExpansionMode) -> usize {
    match mode {
        ExpansionMode::None => 0,
        ExpansionMode::FilePath => 1,
        ExpansionMode::KnowledgePath => 2,
    }
}

fn mode_name(mode: ExpansionMode) -> &'static str {
    match mode {
        ExpansionMode::None => "none",
        ExpansionMode::FilePath => "file_path",
        ExpansionMode::KnowledgePath => "knowledge_path",
    }
}

fn chunk_snapshot_name(mode: ExpansionMode) -> String {
    format!("sparse_chunk.{}.json", mode_name(mode))
}

fn dense_snapshot_name(mode: ExpansionMode) -> String {
    format!("dense.{}.json", mode_name(mode))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexManifest {
    format: String,
    version: u32,
    index_fingerprint: String,
    documents: usize,
    chunks: usize,
}

#[derive(Default)]
struct IndexCache {
    chunk: [OnceLock<Arc<Bm25Index>>; 3],
    path: OnceLock<Arc<PathIndex>>,
    dense: [OnceLock<Arc<VectorStore>>; 3],
}

/// A loaded corpus with its indexes and backends. Immutable after
/// construction apart from lazily built indexes, so one instance serves
/// concurrent queries.
pub struct Pipeline {
    config: PipelineConfig,
    store: ChunkStore,
    positions: HashMap<String, usize>,
    tokenizer: Tokenizer,
    templates: TemplateSet,
    few_shot: Vec<FewShotExample>,
    backends: Backends,
    cache: IndexCache,
    notes: Vec<String>,
}

impl Pipeline {
    /// Pipeline over an in-memory chunk store; indexes are built on demand.
    pub fn from_store(store: ChunkStore, config: PipelineConfig, backends: Backends) -> Result<Self, PipelineError> {
        config.validate()?;
        let tokenizer = config.tokenizer.build()?;
        Self::with_tokenizer(store, config, tokenizer, backends)
    }

    pub fn with_tokenizer(
        store: ChunkStore,
        config: PipelineConfig,
        tokenizer: Tokenizer,
        backends: Backends,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let templates = match &config.generation.template_dir {
            Some(dir) => TemplateSet::with_overrides(dir)?,
            None => TemplateSet::default(),
        };
        let few_shot = match &config.rewrite.few_shot_file {
            Some(path) => load_few_shot(path)?,
            None => builtin_few_shot(),
        };
        let positions = store
            .chunks
            .iter()
            .enumerate()
            .map(|(i, c)| (c.chunk_id.clone(), i))
            .collect();
        Ok(Self {
            config,
            store,
            positions,
            tokenizer,
            templates,
            few_shot,
            backends,
            cache: IndexCache::default(),
            notes: Vec::new(),
        })
    }

    /// Open an index directory written by [`build_indexes`]. Snapshots built
    /// with different tokenizer or chunking settings are ignored and the
    /// indexes rebuilt in memory.
    pub fn open(dir: &Path, config: PipelineConfig, backends: Backends) -> Result<Self, PipelineError> {
        let store = ChunkStore::load(dir)?;
        let mut pipeline = Self::from_store(store, config, backends)?;
        let manifest: Option<IndexManifest> = std::fs::read(dir.join(INDEX_MANIFEST))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok());
        let fresh = manifest.as_ref().is_some_and(|m| {
            m.format == INDEX_FORMAT
                && m.version == INDEX_VERSION
                && m.index_fingerprint == pipeline.config.index_fingerprint()
                && m.chunks == pipeline.store.chunks.len()
        });
        if !fresh {
            pipeline
                .notes
                .push("index snapshots missing or built with other settings; rebuilding in memory".into());
            return Ok(pipeline);
        }
        for mode in [ExpansionMode::None, ExpansionMode::FilePath, ExpansionMode::KnowledgePath] {
            let p = dir.join(chunk_snapshot_name(mode));
            if p.exists() {
                let _ = pipeline.cache.chunk[mode_slot(mode)].set(Arc::new(Bm25Index::read_snapshot(&p)?));
            }
            let p = dir.join(dense_snapshot_name(mode));
            if p.exists() {
                let store = VectorStore::read_snapshot(&p)?;
                if store.dimension() == pipeline.backends.embedder.dimension() {
                    let _ = pipeline.cache.dense[mode_slot(mode)].set(Arc::new(store));
                } else {
                    pipeline.notes.push(format!(
                        "dense snapshot {} has dimension {}, embedder has {}; rebuilding",
                        p.display(),
                        store.dimension(),
                        pipeline.backends.embedder.dimension()
                    ));
                }
            }
        }
        let p = dir.join(PATH_SNAPSHOT);
        if p.exists() {
            let bytes = std::fs::read(&p).map_err(IndexError::Io)?;
            let index: PathIndex =
                serde_json::from_slice(&bytes).map_err(|e| IndexError::Snapshot(e.to_string()))?;
            let _ = pipeline.cache.path.set(Arc::new(index));
        }
        Ok(pipeline)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &ChunkStore {
        &self.store
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    /// Notes gathered while loading (stale snapshots and similar).
    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.positions.get(chunk_id).map(|&i| &self.store.chunks[i])
    }

    fn chunk_index(&self, mode: ExpansionMode) -> Result<Option<Arc<Bm25Index>>, PipelineError> {
        if self.store.chunks.is_empty() {
            return Ok(None);
        }
        let slot = &self.cache.chunk[mode_slot(mode)];
        if let Some(index) = slot.get() {
            return Ok(Some(index.clone()));
        }
        let index = build_chunk_index(&self.store.chunks, mode, &self.tokenizer, self.config.bm25)?;
        let _ = slot.set(Arc::new(index));
        Ok(slot.get().cloned())
    }

    fn path_index(&self) -> Result<Option<Arc<PathIndex>>, PipelineError> {
        if self.store.chunks.is_empty() {
            return Ok(None);
        }
        if let Some(index) = self.cache.path.get() {
            return Ok(Some(index.clone()));
        }
        let index = PathIndex::build(&self.store.chunks, &self.tokenizer, self.config.bm25)?;
        let _ = self.cache.path.set(Arc::new(index));
        Ok(self.cache.path.get().cloned())
    }

    fn dense_store(&self, mode: ExpansionMode) -> Result<Arc<VectorStore>, PipelineError> {
        let slot = &self.cache.dense[mode_slot(mode)];
        if let Some(store) = slot.get() {
            return Ok(store.clone());
        }
        let store = index_chunks(&self.store.chunks, mode, self.backends.embedder.as_ref())
            .map_err(|e| PipelineError::stage("index.dense", &e, e.is_unavailable()))?;
        let _ = slot.set(Arc::new(store));
        Ok(slot.get().cloned().expect("just set"))
    }

    fn file_path_of(&self, chunk_id: &str) -> Option<&str> {
        self.chunk(chunk_id).map(|c| c.file_path.as_str())
    }

    /// Hits from one coarse route.
    pub fn route_hits(&self, kind: RouteKind, query: &str, config: &PipelineConfig) -> Result<Vec<ScoredHit>, PipelineError> {
        let settings = config.routes.settings(kind);
        let filter = config.source_filter();
        match kind {
            RouteKind::SparseChunk => {
                let Some(index) = self.chunk_index(settings.expansion)? else {
                    return Ok(Vec::new());
                };
                let hits = chunk_route(&index, &self.tokenizer.tokenize(query), settings.top_k);
                Ok(filter_by_source(hits, &filter, |id| self.file_path_of(id)))
            }
            RouteKind::SparsePath => {
                let Some(index) = self.path_index()? else {
                    return Ok(Vec::new());
                };
                let hits = index.route(&self.tokenizer.tokenize(query), settings.top_k);
                Ok(filter_by_source(hits, &filter, |id| self.file_path_of(id)))
            }
            RouteKind::Dense => {
                if self.store.chunks.is_empty() {
                    return Ok(Vec::new());
                }
                let store = self.dense_store(settings.expansion)?;
                dense_retrieve(&store, self.backends.embedder.as_ref(), query, settings.top_k, &filter)
                    .map_err(|e| PipelineError::stage("retrieve.dense", &e, e.is_unavailable()))
            }
        }
    }

    fn rerank_hits(
        &self,
        query: &str,
        hits: Vec<ScoredHit>,
        config: &PipelineConfig,
        route: &str,
        info: &mut Vec<RerankInfo>,
    ) -> Result<Vec<ScoredHit>, PipelineError> {
        let rc = &config.rerank;
        if !rc.enabled {
            let mut top: Vec<ScoredHit> = hits.into_iter().take(rc.k).collect();
            rerank_positions(&mut top);
            return Ok(top);
        }
        // scoring text never includes image captions
        let candidates: Vec<RerankCandidate> = hits
            .into_iter()
            .filter_map(|hit| {
                let chunk = self.chunk(&hit.chunk_id)?;
                Some(RerankCandidate {
                    text: crate::sparse::expand_document(chunk, rc.expansion),
                    hit,
                })
            })
            .collect();
        let outcome = rerank(
            query,
            &candidates,
            RerankParams {
                k: rc.k,
                batch_size: rc.batch_size,
            },
            self.backends.scorer.as_ref(),
            &rc.policy(),
        )?;
        info.push(RerankInfo {
            route: route.to_string(),
            layer: outcome.layer,
            exited_early: outcome.exited_early,
        });
        Ok(outcome.hits)
    }

    fn top1_chunk(&self, query: &str, config: &PipelineConfig) -> Option<Chunk> {
        let kind = *config.routes.order.first()?;
        let hits = self.route_hits(kind, query, config).ok()?;
        hits.first().and_then(|h| self.chunk(&h.chunk_id)).cloned()
    }

    pub fn run_query(&self, question: &str) -> Result<QueryResult, PipelineError> {
        self.run_query_with(question, &self.config)
    }

    /// Run every enabled stage for one question under `config`. Settings
    /// that shape the indexes (tokenizer, chunking, BM25) are always taken
    /// from the pipeline's own configuration.
    pub fn run_query_with(&self, question: &str, config: &PipelineConfig) -> Result<QueryResult, PipelineError> {
        config.validate()?;
        let question = question.trim();
        if question.is_empty() {
            return Err(ConfigError::Invalid("question is empty".into()).into());
        }
        let total = Instant::now();
        let mut timings = BTreeMap::new();
        let mut warnings = Vec::new();
        let gen = config.generation.params();
        let chat = self.backends.chat.as_ref();

        let mut rewrite = RewriteArtifacts::new(question);
        if config.rewrite.expansion || config.rewrite.hyde != HydeMode::Off {
            let t = Instant::now();
            if config.rewrite.expansion {
                warnings.extend(expand_query(&mut rewrite, chat, &self.templates, &self.few_shot, &gen));
            }
            if config.rewrite.hyde != HydeMode::Off {
                let retriever = |q: &str| self.top1_chunk(q, config);
                warnings.extend(hyde(&mut rewrite, config.rewrite.hyde, chat, &self.templates, Some(&retriever), &gen));
            }
            timings.insert("rewrite".to_string(), ms(t));
        }
        let mut retrieval_query = if config.rewrite.expansion {
            rewrite.expanded_text()
        } else {
            question.to_string()
        };
        let mut rerank_query = retrieval_query.clone();
        if let Some(h) = rewrite.hypothesis() {
            rerank_query = join_query(&rerank_query, Some(h));
            if config.rewrite.hyde_usage == HydeUsage::Coarse {
                retrieval_query = join_query(&retrieval_query, Some(h));
            }
        }

        let mut stages = Vec::new();
        let mut lists = Vec::new();
        for &kind in &config.routes.order {
            let t = Instant::now();
            let hits = self.route_hits(kind, &retrieval_query, config)?;
            timings.insert(format!("retrieve.{}", kind.label()), ms(t));
            let list = RankedList::new(kind.label(), hits);
            stages.push(StageList {
                stage: kind.label().to_string(),
                chunk_ids: list.chunk_ids().into_iter().map(String::from).collect(),
            });
            lists.push(list);
        }

        let strategy = config.fusion.strategy;
        let mut rerank_info = Vec::new();
        let k = config.rerank.k;
        // hit lists that each get one generated answer
        let answer_sets: Vec<Vec<ScoredHit>>;
        let final_hits: Vec<ScoredHit>;
        if !strategy.is_per_route() {
            let t = Instant::now();
            let fused = match strategy {
                FusionStrategy::Rrf => rrf(&lists, config.fusion.rrf_k)?,
                _ => simple_merge(&lists),
            };
            timings.insert("fusion".to_string(), ms(t));
            stages.push(StageList {
                stage: "coarse".into(),
                chunk_ids: fused.chunk_ids().into_iter().map(String::from).collect(),
            });
            let t = Instant::now();
            let label = fused.route.clone();
            final_hits = self.rerank_hits(&rerank_query, fused.hits, config, &label, &mut rerank_info)?;
            if config.rerank.enabled {
                timings.insert("rerank".to_string(), ms(t));
            }
            answer_sets = vec![final_hits.clone()];
        } else {
            stages.push(StageList {
                stage: "coarse".into(),
                chunk_ids: simple_merge(&lists).chunk_ids().into_iter().map(String::from).collect(),
            });
            let t = Instant::now();
            let mut reranked = Vec::new();
            for list in &lists {
                let hits = self.rerank_hits(&rerank_query, list.hits.clone(), config, &list.route, &mut rerank_info)?;
                reranked.push(RankedList::new(list.route.clone(), hits));
            }
            if config.rerank.enabled {
                timings.insert("rerank".to_string(), ms(t));
            }
            let t = Instant::now();
            let mut fused = match strategy {
                FusionStrategy::RerankRrf => rrf(&reranked, config.fusion.rrf_k)?.hits,
                _ => simple_merge(&reranked).hits,
            };
            fused.truncate(k);
            timings.insert("fusion".to_string(), ms(t));
            final_hits = fused;
            answer_sets = match strategy {
                FusionStrategy::RerankRrf => vec![final_hits.clone()],
                _ => reranked.into_iter().map(|l| l.hits).collect(),
            };
        }
        stages.push(StageList {
            stage: "final".into(),
            chunk_ids: final_hits.iter().map(|h| h.chunk_id.clone()).collect(),
        });

        let to_chunks = |hits: &[ScoredHit]| -> Vec<Chunk> {
            hits.iter().filter_map(|h| self.chunk(&h.chunk_id)).cloned().collect()
        };
        let compress = |chunks: Vec<Chunk>| -> Vec<Chunk> {
            if config.compress.enabled {
                compress_contexts(question, &chunks, &config.compression(), &self.tokenizer)
            } else {
                chunks
            }
        };
        let t = Instant::now();
        let context_chunks = compress(to_chunks(&final_hits));
        let answer_chunks: Vec<Vec<Chunk>> = if answer_sets.len() == 1 {
            vec![context_chunks.clone()]
        } else {
            answer_sets.iter().map(|s| compress(to_chunks(s))).collect()
        };
        if config.compress.enabled {
            timings.insert("compress".to_string(), ms(t));
        }

        let t = Instant::now();
        let mut answers = Vec::with_capacity(answer_chunks.len());
        for chunks in &answer_chunks {
            answers.push(generate_answer(question, chunks, config.template, &self.templates, chat, &gen)?);
        }
        let mut answer = match strategy {
            FusionStrategy::AnswerLonger => answer_fuse_longer(&answers)?,
            FusionStrategy::AnswerConcat => answer_fuse_concat(&answers)?,
            _ => answers.remove(0),
        };
        timings.insert("generate".to_string(), ms(t));

        let top1 = final_hits.first().and_then(|h| self.chunk(&h.chunk_id));
        match config.answer_merge {
            AnswerMerge::Off => {}
            AnswerMerge::DocumentConcat => {
                let t = Instant::now();
                answer = document_concat(&answer, top1.map(|c| c.text.as_str()).unwrap_or(""));
                timings.insert("answer_merge".to_string(), ms(t));
            }
            AnswerMerge::PromptMerge => {
                let t = Instant::now();
                let (merged, warning) = integrate_answer(question, &answer, top1, &self.templates, chat, &gen);
                answer = merged;
                warnings.extend(warning);
                timings.insert("answer_merge".to_string(), ms(t));
            }
        }

        let contexts = final_hits
            .iter()
            .zip(&context_chunks)
            .map(|(hit, chunk)| ContextHit {
                chunk_id: hit.chunk_id.clone(),
                text: chunk.text.clone(),
                score: hit.score,
                rank: hit.rank,
                route: hit.route.label().to_string(),
                file_path: chunk.file_path.clone(),
                knowledge_path: chunk.knowledge_path.clone(),
                image_captions: chunk.image_captions.clone(),
            })
            .collect();
        timings.insert("total".to_string(), ms(total));
        Ok(QueryResult {
            question: question.to_string(),
            answer,
            contexts,
            rewrite,
            stages,
            rerank: rerank_info,
            timings,
            fingerprint: config.fingerprint(),
            warnings,
        })
    }
}

/// Ingest a documentation package (directory or zip). OCR text and captions
/// come from sidecar files stored beside each image.
pub fn ingest_corpus(corpus: &Path, config: &PipelineConfig) -> Result<ChunkStore, PipelineError> {
    let package = Package::open(corpus)?;
    let sidecar = SidecarText::new(&package);
    let options = IngestOptions {
        chunking: config.chunking.clone(),
        image_filter: ImageFilter::new(config.images.clone())?,
        ..IngestOptions::default()
    };
    let backends = IngestBackends {
        ocr: Some(&sidecar),
        captioner: Some(&sidecar),
    };
    Ok(ingest_package(&package, &options, &backends)?.into())
}

/// Write the chunk store and every index the config's routes use into `dir`.
pub fn build_indexes(
    store: &ChunkStore,
    config: &PipelineConfig,
    tokenizer: &Tokenizer,
    embedder: &dyn EmbeddingProvider,
    dir: &Path,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir).map_err(IndexError::Io)?;
    store.save(dir)?;
    if !store.chunks.is_empty() {
        let mode = config.routes.sparse_chunk.expansion;
        build_chunk_index(&store.chunks, mode, tokenizer, config.bm25)?
            .write_snapshot(dir.join(chunk_snapshot_name(mode)))?;
        let path = PathIndex::build(&store.chunks, tokenizer, config.bm25)?;
        let bytes = serde_json::to_vec(&path).map_err(|e| IndexError::Snapshot(e.to_string()))?;
        std::fs::write(dir.join(PATH_SNAPSHOT), bytes).map_err(IndexError::Io)?;
        if config.needs_dense() {
            let mode = config.routes.dense.expansion;
            index_chunks(&store.chunks, mode, embedder)
                .map_err(|e| PipelineError::stage("index.dense", &e, e.is_unavailable()))?
                .write_snapshot(dir.join(dense_snapshot_name(mode)))?;
        }
    }
    let manifest = IndexManifest {
        format: INDEX_FORMAT.into(),
        version: INDEX_VERSION,
        index_fingerprint: config.index_fingerprint(),
        documents: store.documents.len(),
        chunks: store.chunks.len(),
    };
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| IndexError::Snapshot(e.to_string()))?;
    std::fs::write(dir.join(INDEX_MANIFEST), bytes).map_err(IndexError::Io)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReindexReport {
    pub documents: usize,
    pub chunks: usize,
    pub warnings: usize,
    pub elapsed_ms: f64,
}

/// Rebuild `index_dir` from `corpus` from scratch. The new snapshots are
/// written to a sibling directory and swapped in only once complete; any
/// failure leaves the previous index untouched.
pub fn reindex(
    corpus: &Path,
    index_dir: &Path,
    config: &PipelineConfig,
    embedder: &dyn EmbeddingProvider,
) -> Result<ReindexReport, PipelineError> {
    let start = Instant::now();
    let tokenizer = config.tokenizer.build()?;
    let store = ingest_corpus(corpus, config)?;
    let name = index_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "index".into());
    let parent = index_dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let staging = parent.join(format!(".{name}.staging-{}", std::process::id()));
    let retired = parent.join(format!(".{name}.retired-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&staging);
    if let Err(e) = build_indexes(&store, config, &tokenizer, embedder, &staging) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    let io = |e: std::io::Error| PipelineError::Index(IndexError::Io(e));
    if index_dir.exists() {
        let _ = std::fs::remove_dir_all(&retired);
        std::fs::rename(index_dir, &retired).map_err(io)?;
        if let Err(e) = std::fs::rename(&staging, index_dir) {
            let _ = std::fs::rename(&retired, index_dir);
            return Err(io(e));
        }
        let _ = std::fs::remove_dir_all(&retired);
    } else {
        std::fs::rename(&staging, index_dir).map_err(io)?;
    }
    Ok(ReindexReport {
        documents: store.documents.len(),
        chunks: store.chunks.len(),
        warnings: store.warnings.len(),
        elapsed_ms: ms(start),
    })
}

/// One evaluation question with its gold chunk ids and/or answer keywords.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question: String,
    #[serde(default)]
    pub gold_chunk_ids: Vec<String>,
    #[serde(default)]
    pub gold_keywords: Vec<String>,
}

pub fn load_eval_records(path: &Path) -> Result<Vec<EvalRecord>, PipelineError> {
    let records: Vec<EvalRecord> = crate::ingest::read_jsonl(path)?;
    for (i, r) in records.iter().enumerate() {
        if r.gold_chunk_ids.is_empty() && r.gold_keywords.is_empty() {
            return Err(ConfigError::Invalid(format!("{}: record {} has no gold field", path.display(), i + 1)).into());
        }
    }
    Ok(records)
}

pub const DEFAULT_EVAL_KS: [usize; 3] = [1, 3, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub questions: usize,
    /// Questions with gold chunk ids.
    pub retrieval_questions: usize,
    /// stage → k → fraction of questions with a gold chunk in the top k.
    pub hit_at: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Mean reciprocal rank of the first gold chunk in the final contexts.
    pub mrr: f64,
    /// Mean fraction of gold keywords found in the answer.
    pub keyword_recall: Option<f64>,
    pub mean_timings_ms: BTreeMap<String, f64>,
    pub mean_context_chars: f64,
    pub mean_context_tokens: f64,
    pub chars_per_token: f64,
    /// Question ids (0-based) whose gold chunk was absent from the final contexts.
    pub final_misses: Vec<usize>,
}

pub fn evaluate(
    pipeline: &Pipeline,
    records: &[EvalRecord],
    config: &PipelineConfig,
    ks: &[usize],
) -> Result<EvalReport, PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::EmptyEvalSet);
    }
    let mut hits: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    let mut rr_sum = 0.0;
    let mut retrieval_questions = 0;
    let mut keyword_sum = 0.0;
    let mut keyword_questions = 0;
    let mut timing_sum: BTreeMap<String, f64> = BTreeMap::new();
    let mut context_chars = 0usize;
    let mut final_misses = Vec::new();
    for (qi, record) in records.iter().enumerate() {
        let result = pipeline.run_query_with(&record.question, config)?;
        for (k, v) in &result.timings {
            *timing_sum.entry(k.clone()).or_default() += v;
        }
        context_chars += result.contexts.iter().map(|c| c.text.chars().count()).sum::<usize>();
        if !record.gold_chunk_ids.is_empty() {
            retrieval_questions += 1;
            let is_gold = |id: &str| record.gold_chunk_ids.iter().any(|g| g == id);
            for stage in &result.stages {
                let per_k = hits.entry(stage.stage.clone()).or_default();
                for &k in ks {
                    let found = stage.chunk_ids.iter().take(k).any(|id| is_gold(id));
                    *per_k.entry(k).or_default() += usize::from(found);
                }
            }
            match result.contexts.iter().position(|c| is_gold(&c.chunk_id)) {
                Some(p) => rr_sum += 1.0 / (p + 1) as f64,
                None => final_misses.push(qi),
            }
        }
        if !record.gold_keywords.is_empty() {
            keyword_questions += 1;
            let answer = result.answer.to_lowercase();
            let found = record
                .gold_keywords
                .iter()
                .filter(|k| answer.contains(&k.to_lowercase()))
                .count();
            keyword_sum += found as f64 / record.gold_keywords.len() as f64;
        }
    }
    let n = records.len() as f64;
    let denom = retrieval_questions.max(1) as f64;
    let mean_context_chars = context_chars as f64 / n;
    Ok(EvalReport {
        questions: records.len(),
        retrieval_questions,
        hit_at: hits
            .into_iter()
            .map(|(stage, per_k)| (stage, per_k.into_iter().map(|(k, c)| (k, c as f64 / denom)).collect()))
            .collect(),
        mrr: rr_sum / denom,
        keyword_recall: (keyword_questions > 0).then(|| keyword_sum / keyword_questions as f64),
        mean_timings_ms: timing_sum.into_iter().map(|(k, v)| (k, v / n)).collect(),
        mean_context_chars,
        mean_context_tokens: mean_context_chars / CHARS_PER_TOKEN,
        chars_per_token: CHARS_PER_TOKEN,
        final_misses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SourceDocument;

    fn chunk(id: &str, file: &str, kpath: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: format!("{id}:0"),
            doc_id: id.into(),
            text: text.into(),
            char_span: (0, text.chars().count()),
            file_path: file.into(),
            knowledge_path: kpath.into(),
            image_captions: vec![],
        }
    }

    fn store() -> ChunkStore {
        let chunks = vec![
            chunk("a", "net/a.html", "网络/告警", "alarm handling for the base station link"),
            chunk("b", "net/b.html", "网络/配置", "interface mtu configuration steps"),
            chunk("c", "core/c.html", "核心网/AMF", "amf registration failure causes"),
        ];
        ChunkStore {
            documents: chunks
                .iter()
                .map(|c| SourceDocument {
                    doc_id: c.doc_id.clone(),
                    file_path: c.file_path.clone(),
                    knowledge_path: c.knowledge_path.clone(),
                    body: c.text.clone(),
                    images: vec![],
                })
                .collect(),
            chunks,
            warnings: vec![],
        }
    }

    fn pipeline(config: PipelineConfig) -> Pipeline {
        let tok = config.tokenizer.build().unwrap();
        Pipeline::with_tokenizer(store(), config, tok.clone(), Backends::mock(&tok)).unwrap()
    }

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = PipelineConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), c);
        assert_eq!(c.routes.order, vec![RouteKind::SparseChunk, RouteKind::SparsePath]);
        assert_eq!(c.routes.sparse_chunk.top_k, 192);
        assert_eq!(c.routes.sparse_path.top_k, 6);
        assert_eq!(c.rerank.deep_layer, 28);
        assert_eq!(c.answer_merge, AnswerMerge::DocumentConcat);
    }

    #[test]
    fn config_errors() {
        assert!(PipelineConfig::from_toml_str("[routes]\norder = []\n").is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1\n").is_err());
        assert!(PipelineConfig::from_toml_str("[compress]\nrate = 0.0\n").is_err());
        assert!(PipelineConfig::from_toml_str("[fusion]\nstrategy = \"nope\"\n").is_err());
    }

    #[test]
    fn overrides_merge_and_validate() {
        let base = PipelineConfig::default();
        let o = serde_json::json!({"rerank": {"k": 3}, "compress": {"enabled": true, "rate": 0.8}});
        let c = base.with_overrides(&o).unwrap();
        assert_eq!(c.rerank.k, 3);
        assert_eq!(c.rerank.deep_layer, 28);
        assert!(c.compress.enabled);
        assert_ne!(c.fingerprint(), base.fingerprint());
        assert!(base.with_overrides(&serde_json::json!({"chunking": {"chunk_size": 5}})).is_err());
        assert!(base.with_overrides(&serde_json::json!({"rerank": {"kk": 3}})).is_err());
        assert!(base.with_overrides(&serde_json::json!({"rerank": {"k": 0}})).is_err());
        assert_eq!(base.with_overrides(&serde_json::Value::Null).unwrap(), base);
    }

    #[test]
    fn query_runs_all_default_stages() {
        let p = pipeline(PipelineConfig::default());
        let r = p.run_query("mtu configuration").unwrap();
        assert_eq!(r.contexts[0].chunk_id, "b:0");
        assert!(r.answer.starts_with("[normal] docs="));
        assert!(r.answer.ends_with("\n\ninterface mtu configuration steps"));
        for stage in ["retrieve.sparse_chunk", "retrieve.sparse_path", "fusion", "rerank", "generate", "answer_merge", "total"] {
            assert!(r.timings.contains_key(stage), "{stage}");
        }
        assert!(r.contexts.len() <= 6);
        assert!(matches!(p.run_query("  "), Err(PipelineError::Config(_))));
    }

    #[test]
    fn unreachable_chat_is_tagged() {
        let tok = Tokenizer::default();
        let mut b = Backends::mock(&tok);
        b.chat = Arc::new(MockChatClient::unavailable());
        let p = Pipeline::with_tokenizer(store(), PipelineConfig::default(), tok, b).unwrap();
        let err = p.run_query("mtu").unwrap_err();
        assert!(err.is_unavailable());
        assert_eq!(err.stage_tag(), "generate");
    }

    #[test]
    fn answer_concat_joins_route_answers() {
        let mut c = PipelineConfig::default();
        c.fusion.strategy = FusionStrategy::AnswerConcat;
        c.answer_merge = AnswerMerge::Off;
        c.routes.order = vec![RouteKind::SparseChunk, RouteKind::Dense];
        let p = pipeline(c);
        let r = p.run_query("amf registration").unwrap();
        let parts: Vec<&str> = r.answer.split("\n\n").collect();
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|a| a.starts_with("[normal]")));
    }

    #[test]
    fn source_filter_limits_routes() {
        let mut c = PipelineConfig::default();
        c.allowed_file_prefixes = Some(vec!["core/".into()]);
        c.routes.order = vec![RouteKind::SparseChunk, RouteKind::SparsePath, RouteKind::Dense];
        let p = pipeline(c);
        let r = p.run_query("alarm mtu amf").unwrap();
        assert!(r.contexts.iter().all(|h| h.file_path.starts_with("core/")));
        assert!(!r.contexts.is_empty());
    }

    #[test]
    fn single_route_fusions_agree() {
        let mut ids = Vec::new();
        for s in [FusionStrategy::SimpleMerge, FusionStrategy::Rrf, FusionStrategy::RerankRrf] {
            let mut c = PipelineConfig::default();
            c.routes.order = vec![RouteKind::SparseChunk];
            c.fusion.strategy = s;
            let r = pipeline(c).run_query("alarm link mtu").unwrap();
            let mut set: Vec<String> = r.contexts.iter().map(|h| h.chunk_id.clone()).collect();
            set.sort();
            ids.push(set);
        }
        assert_eq!(ids[0], ids[1]);
        assert_eq!(ids[1], ids[2]);
    }

    #[test]
    fn empty_store_still_answers() {
        let tok = Tokenizer::default();
        let p = Pipeline::with_tokenizer(ChunkStore::default(), PipelineConfig::default(), tok.clone(), Backends::mock(&tok)).unwrap();
        let r = p.run_query("anything").unwrap();
        assert!(r.contexts.is_empty());
        assert_eq!(r.answer, "[normal] docs= query=anything");
    }

    #[test]
    fn evaluation_metrics() {
        let p = pipeline(PipelineConfig::default());
        let records = vec![
            EvalRecord {
                question: "mtu configuration".into(),
                gold_chunk_ids: vec!["b:0".into()],
                gold_keywords: vec!["MTU".into(), "absent".into()],
            },
            EvalRecord {
                question: "amf registration".into(),
                gold_chunk_ids: vec!["c:0".into()],
                gold_keywords: vec![],
            },
        ];
        let report = evaluate(&p, &records, p.config(), &DEFAULT_EVAL_KS).unwrap();
        assert_eq!(report.hit_at["final"][&6], 1.0);
        assert_eq!(report.hit_at["final"][&1], 1.0);
        assert_eq!(report.mrr, 1.0);
        assert_eq!(report.keyword_recall, Some(0.5));
        assert!(matches!(evaluate(&p, &[], p.config(), &[1]), Err(PipelineError::EmptyEvalSet)));
    }

    #[test]
    fn snapshots_are_used_when_fresh() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default();
        let tok = config.tokenizer.build().unwrap();
        build_indexes(&store(), &config, &tok, &HashEmbedder::new(tok.clone(), 64), dir.path()).unwrap();
        let p = Pipeline::open(dir.path(), config.clone(), Backends::mock(&tok)).unwrap();
        assert!(p.notes().is_empty());
        assert_eq!(p.store().chunks.len(), 3);
        let direct = pipeline(config.clone()).run_query("alarm").unwrap();
        let loaded = p.run_query("alarm").unwrap();
        assert_eq!(direct.contexts, loaded.contexts);

        let mut other = config;
        other.bm25.k1 = 1.2;
        let p = Pipeline::open(dir.path(), other, Backends::mock(&tok)).unwrap();
        assert_eq!(p.notes().len(), 1);
    }
}
