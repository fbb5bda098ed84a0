//! Chat-model access, prompt templates, query rewriting and answer
//! generation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{post_json, Reachability};
use crate::error::{BackendError, ConfigError};
use crate::ingest::Chunk;

pub const DEFAULT_MAX_DOCUMENTS: usize = 6;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const CONCAT_SEPARATOR: &str = "\n\n";

pub const ENV_CHAT_URL: &str = "RAG_CHAT_URL";
pub const ENV_CHAT_KEY: &str = "RAG_CHAT_KEY";
pub const ENV_CHAT_MODEL: &str = "RAG_CHAT_MODEL";

#[derive(Debug, Error)]
pub enum QaError {
    #[error("{stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("template {template}: missing value for slot {{{slot}}}")]
    MissingSlot { template: String, slot: String },
    #[error("template {template} lacks required slot {{{slot}}}")]
    TemplateSlot { template: String, slot: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl QaError {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, QaError::Backend { source, .. } if source.is_unavailable())
    }

    pub fn stage(&self) -> &'static str {
        match self {
            QaError::Backend { stage, .. } => stage,
            _ => "template",
        }
    }
}

/// One completion request. Besides the rendered prompt it carries the
/// pieces it was rendered from so test doubles can answer deterministically.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub template: String,
    pub prompt: String,
    pub doc_ids: Vec<String>,
    pub query: String,
    /// Extra inputs that shaped the prompt, such as a prior answer.
    pub attachments: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
    fn reachable(&self) -> Option<bool> {
        Some(true)
    }
}

/// Deterministic chat double. The reply is a digest of the request:
/// `[<template>] docs=<sorted ids> query=<query>` followed by
/// ` | <attachment>` for each attachment.
#[derive(Debug, Default)]
pub struct MockChatClient {
    calls: AtomicUsize,
    unavailable: bool,
    log: Mutex<Vec<ChatRequest>>,
}

impl MockChatClient {
    pub fn new() -> Self {
        Self::default()
    }

    /// A client whose every call fails as unreachable.
    pub fn unavailable() -> Self {
        Self {
            unavailable: true,
            ..Self::default()
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn digest(request: &ChatRequest) -> String {
        let ids: BTreeSet<&str> = request.doc_ids.iter().map(String::as_str).collect();
        let mut out = format!(
            "[{}] docs={} query={}",
            request.template,
            ids.into_iter().collect::<Vec<_>>().join(","),
            request.query
        );
        for a in &request.attachments {
            out.push_str(" | ");
            out.push_str(a);
        }
        out
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("mock log poisoned").push(request.clone());
        if self.unavailable {
            return Err(BackendError::Unavailable("mock chat backend is down".into()));
        }
        Ok(Self::digest(request))
    }

    fn reachable(&self) -> Option<bool> {
        Some(!self.unavailable)
    }
}

/// Chat backend speaking the chat-completions wire format.
pub struct HttpChatClient {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    status: Reachability,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: String,
}

impl HttpChatClient {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| BackendError::Failed(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            model: model.into(),
            api_key,
            client,
            status: Reachability::default(),
        })
    }

    /// Build from `RAG_CHAT_URL`, `RAG_CHAT_KEY` and `RAG_CHAT_MODEL`;
    /// `None` when no URL is set.
    pub fn from_env() -> Option<Result<Self, BackendError>> {
        let url = std::env::var(ENV_CHAT_URL).ok().filter(|u| !u.is_empty())?;
        let model = std::env::var(ENV_CHAT_MODEL).unwrap_or_else(|_| "default".into());
        let key = std::env::var(ENV_CHAT_KEY).ok().filter(|k| !k.is_empty());
        Some(Self::new(url, model, key))
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = CompletionRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let result = post_json::<_, CompletionResponse>(&self.client, &self.url, self.api_key.as_deref(), &body)
            .and_then(|r| {
                r.choices
                    .into_iter()
                    .next()
                    .map(|c| c.message.content)
                    .ok_or_else(|| BackendError::Failed("completion has no choices".into()))
            });
        self.status.record(&result);
        result
    }

    fn reachable(&self) -> Option<bool> {
        self.status.get()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QaTemplate {
    #[default]
    Normal,
    Cot,
    Markdown,
    Focused,
    Integrate,
}

pub const NORMAL_TEMPLATE: &str = "The context information is as follows:\n\
----------\n\
{context_str}\n\
----------\n\
Please answer the following question based on the context information and not your own knowledge. Answers can be itemized. If the context does not contain relevant information, you may respond with \"uncertain\" and should not restate the context information:\n\
{query_str}\n\
Answer:";

pub const COT_TEMPLATE: &str = "Context information as follows:\n\
----------\n\
{context_str}\n\
----------\n\
Please answer the following question based on the context information rather than your own knowledge. Think step by step, first provide an analysis process, then generate an answer:\n\
{query_str}\n\
Answer:";

pub const MARKDOWN_TEMPLATE: &str = "## Objective\n\
Please, based on the information from {k} private domain documents about 5G operational maintenance, answer the given question.\n\
## Requirements\n\
1. You may itemize your answer; be as detailed and specific as possible.\n\
2. Do not merely repeat information from the context.\n\
3. Do not use your own knowledge; rely solely on the content from the context documents.\n\
## Context\n\
{context_str}\n\
## Question\n\
{query_str}\n\
## Answer";

pub const FOCUSED_TEMPLATE: &str = "Context information as follows:\n\
----------\n\
{context_str}\n\
----------\n\
Please answer the following question based on the context information rather than your own knowledge. You may itemize your answer. Document 0's content is particularly important, consider it carefully. If the context does not contain relevant knowledge, you may respond with 'uncertain'. Do not simply restate the context information:\n\
{query_str}\n\
Answer:";

pub const INTEGRATE_TEMPLATE: &str = "Context:\n\
----------\n\
{top1_content_str}\n\
----------\n\
You will see a question and a corresponding reference answer\n\
Please, based on the context knowledge and not your own knowledge, supplement the reference answer to make it more complete in addressing the question\n\
Please note, strictly retain every character of the reference answer and reasonably integrate your supplement with the reference answer to produce a longer, more complete answer containing more terms and itemization\n\
Question:\n\
{query_str}\n\
Reference answer:\n\
{answer_str}\n\
New answer:";

// Rewriting prompts. These wordings are defaults of this project and can be
// replaced through the template directory.
pub const KEYWORD_TEMPLATE: &str = "Expand the question below with related technical keywords, synonyms and abbreviations. Reply with keywords only, separated by commas.\n\
{examples}\n\
Question: {query_str}\n\
Keywords:";

pub const SUMMARY_TEMPLATE: &str = "Rewrite the question as one concise search query that uses the most relevant of the keywords.\n\
Question: {query_str}\n\
Keywords: {keywords}\n\
Query:";

pub const HYDE_TEMPLATE: &str = "Write a short passage from a technical manual that answers the question.\n\
Question: {query_str}\n\
Passage:";

pub const HYDE_GROUNDED_TEMPLATE: &str = "Using the reference document, write a short passage from a technical manual that answers the question.\n\
Reference document:\n\
{context_str}\n\
Question: {query_str}\n\
Passage:";

impl QaTemplate {
    pub const ALL: [QaTemplate; 5] = [
        QaTemplate::Normal,
        QaTemplate::Cot,
        QaTemplate::Markdown,
        QaTemplate::Focused,
        QaTemplate::Integrate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QaTemplate::Normal => "normal",
            QaTemplate::Cot => "cot",
            QaTemplate::Markdown => "markdown",
            QaTemplate::Focused => "focused",
            QaTemplate::Integrate => "integrate",
        }
    }

    pub fn default_text(self) -> &'static str {
        match self {
            QaTemplate::Normal => NORMAL_TEMPLATE,
            QaTemplate::Cot => COT_TEMPLATE,
            QaTemplate::Markdown => MARKDOWN_TEMPLATE,
            QaTemplate::Focused => FOCUSED_TEMPLATE,
            QaTemplate::Integrate => INTEGRATE_TEMPLATE,
        }
    }

    pub fn required_slots(self) -> &'static [&'static str] {
        match self {
            QaTemplate::Integrate => &["top1_content_str", "query_str", "answer_str"],
            _ => &["context_str", "query_str"],
        }
    }
}

const REWRITE_TEMPLATES: [(&str, &str, &[&str]); 4] = [
    ("keyword_expansion", KEYWORD_TEMPLATE, &["query_str"]),
    ("summary", SUMMARY_TEMPLATE, &["query_str", "keywords"]),
    ("hyde", HYDE_TEMPLATE, &["query_str"]),
    ("hyde_grounded", HYDE_GROUNDED_TEMPLATE, &["context_str", "query_str"]),
];

/// Fill `{slot}` placeholders in one pass. Every placeholder in the text
/// must have a value; substituted values are never rescanned.
pub fn render(name: &str, text: &str, values: &[(&str, &str)]) -> Result<String, QaError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let slot = close.map(|c| &after[..c]).filter(|s| {
            !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        });
        match (slot, close) {
            (Some(slot), Some(c)) => {
                let value = values
                    .iter()
                    .find(|(k, _)| *k == slot)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| QaError::MissingSlot {
                        template: name.to_string(),
                        slot: slot.to_string(),
                    })?;
                out.push_str(value);
                rest = &after[c + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Prompt texts by name, starting from the built-in set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    texts: BTreeMap<String, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        let mut texts = BTreeMap::new();
        for t in QaTemplate::ALL {
            texts.insert(t.name().to_string(), t.default_text().to_string());
        }
        for (name, text, _) in REWRITE_TEMPLATES {
            texts.insert(name.to_string(), text.to_string());
        }
        Self { texts }
    }
}

impl TemplateSet {
    /// Built-ins overridden by any `<name>.txt` in `dir`. A trailing newline
    /// in a file is dropped.
    pub fn with_overrides(dir: &Path) -> Result<Self, QaError> {
        let mut set = Self::default();
        let names: Vec<String> = set.texts.keys().cloned().collect();
        for name in names {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
                path: path.display().to_string(),
                source,
            })?;
            let text = text.strip_suffix('\n').unwrap_or(&text).to_string();
            set.set(&name, text)?;
        }
        Ok(set)
    }

    /// Replace one template, checking that its required slots are present.
    pub fn set(&mut self, name: &str, text: String) -> Result<(), QaError> {
        let required: &[&str] = QaTemplate::ALL
            .iter()
            .find(|t| t.name() == name)
            .map(|t| t.required_slots())
            .or_else(|| REWRITE_TEMPLATES.iter().find(|r| r.0 == name).map(|r| r.2))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown template {name}")))?;
        for slot in required {
            if !text.contains(&format!("{{{slot}}}")) {
                return Err(QaError::TemplateSlot {
                    template: name.to_string(),
                    slot: slot.to_string(),
                });
            }
        }
        self.texts.insert(name.to_string(), text);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &str {
        self.texts.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, QaError> {
        render(name, self.get(name), values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_documents: usize,
    pub include_image_captions: bool,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_documents: DEFAULT_MAX_DOCUMENTS,
            include_image_captions: true,
            temperature: 0.0,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// Number the first `max_documents` chunks as `### Document i: text`, one
/// block per chunk, blocks joined by newlines. Image captions follow the
/// chunk text on their own lines when enabled.
pub fn build_context(chunks: &[Chunk], max_documents: usize, include_image_captions: bool) -> String {
    chunks
        .iter()
        .take(max_documents)
        .enumerate()
        .map(|(i, c)| {
            let mut block = format!("### Document {i}: {}", c.text);
            if include_image_captions && !c.image_captions.is_empty() {
                block.push('\n');
                block.push_str(&c.image_captions.join("\n"));
            }
            block
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn call(client: &dyn ChatClient, stage: &'static str, request: ChatRequest) -> Result<String, QaError> {
    client
        .complete(&request)
        .map_err(|source| QaError::Backend { stage, source })
}

/// Render `template` over the context built from `chunks` and ask the model.
pub fn generate_answer(
    query: &str,
    chunks: &[Chunk],
    template: QaTemplate,
    templates: &TemplateSet,
    client: &dyn ChatClient,
    params: &GenerationParams,
) -> Result<String, QaError> {
    let used = &chunks[..chunks.len().min(params.max_documents)];
    let context = build_context(used, params.max_documents, params.include_image_captions);
    let k = used.len().to_string();
    let prompt = match template {
        QaTemplate::Integrate => {
            let top1 = used.first().map(|c| c.text.as_str()).unwrap_or("");
            templates.render(
                template.name(),
                &[("top1_content_str", top1), ("query_str", query), ("answer_str", "")],
            )?
        }
        _ => templates.render(
            template.name(),
            &[("context_str", &context), ("query_str", query), ("k", &k)],
        )?,
    };
    call(
        client,
        "generate",
        ChatRequest {
            template: template.name().to_string(),
            prompt,
            doc_ids: used.iter().map(|c| c.chunk_id.clone()).collect(),
            query: query.to_string(),
            attachments: Vec::new(),
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        },
    )
}

/// Ask the model to supplement `answer` from the top-1 chunk. On failure
/// the original answer is returned along with a warning.
pub fn integrate_answer(
    query: &str,
    answer: &str,
    top1: Option<&Chunk>,
    templates: &TemplateSet,
    client: &dyn ChatClient,
    params: &GenerationParams,
) -> (String, Option<String>) {
    let top1_text = top1.map(|c| c.text.as_str()).unwrap_or("");
    let prompt = match templates.render(
        QaTemplate::Integrate.name(),
        &[("top1_content_str", top1_text), ("query_str", query), ("answer_str", answer)],
    ) {
        Ok(p) => p,
        Err(e) => return (answer.to_string(), Some(format!("integration skipped: {e}"))),
    };
    let request = ChatRequest {
        template: QaTemplate::Integrate.name().to_string(),
        prompt,
        doc_ids: top1.map(|c| vec![c.chunk_id.clone()]).unwrap_or_default(),
        query: query.to_string(),
        attachments: vec![answer.to_string()],
        temperature: params.temperature,
        max_tokens: params.max_tokens,
    };
    match call(client, "integrate", request) {
        Ok(merged) if !merged.trim().is_empty() => (merged, None),
        Ok(_) => (answer.to_string(), Some("integration returned an empty answer".into())),
        Err(e) => (answer.to_string(), Some(format!("integration failed, keeping answer: {e}"))),
    }
}

/// Append the top-1 chunk text to the answer. No model call.
pub fn document_concat(answer: &str, top1_text: &str) -> String {
    if top1_text.is_empty() {
        return answer.to_string();
    }
    format!("{answer}{CONCAT_SEPARATOR}{top1_text}")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMerge {
    Off,
    #[default]
    DocumentConcat,
    PromptMerge,
}

/// A worked keyword-expansion example shown to the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub question: String,
    pub keywords: Vec<String>,
}

/// Bundled examples. They are illustrative placeholders, not annotated data.
pub const BUILTIN_FEW_SHOT: &str = include_str!("../data/keyword_examples.json");

pub fn builtin_few_shot() -> Vec<FewShotExample> {
    serde_json::from_str(BUILTIN_FEW_SHOT).expect("bundled few-shot examples parse")
}

pub fn load_few_shot(path: &Path) -> Result<Vec<FewShotExample>, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))
}

fn render_examples(examples: &[FewShotExample]) -> String {
    examples
        .iter()
        .map(|e| format!("Question: {}\nKeywords: {}", e.question, e.keywords.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Everything query rewriting produced for one question.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewriteArtifacts {
    pub original: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keywords: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expanded_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothetical: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounded_hypothetical: Option<String>,
}

impl RewriteArtifacts {
    pub fn new(original: &str) -> Self {
        Self {
            original: original.to_string(),
            ..Self::default()
        }
    }

    /// Retrieval text with the expanded query appended to the original.
    pub fn expanded_text(&self) -> String {
        join_query(&self.original, self.expanded_query.as_deref())
    }

    /// The best available hypothetical document.
    pub fn hypothesis(&self) -> Option<&str> {
        self.grounded_hypothetical.as_deref().or(self.hypothetical.as_deref())
    }
}

/// The original query, followed by `extra` on a new line when it adds text.
pub fn join_query(original: &str, extra: Option<&str>) -> String {
    match extra.map(str::trim).filter(|e| !e.is_empty() && *e != original) {
        Some(e) => format!("{original}\n{e}"),
        None => original.to_string(),
    }
}

/// Keyword association followed by summarization into one expanded query.
/// Failures leave the expanded query equal to the original with a warning.
pub fn expand_query(
    artifacts: &mut RewriteArtifacts,
    client: &dyn ChatClient,
    templates: &TemplateSet,
    examples: &[FewShotExample],
    params: &GenerationParams,
) -> Vec<String> {
    let q = artifacts.original.clone();
    let request = |template: &str, prompt: String, attachments: Vec<String>| ChatRequest {
        template: template.to_string(),
        prompt,
        doc_ids: Vec::new(),
        query: q.clone(),
        attachments,
        temperature: params.temperature,
        max_tokens: params.max_tokens,
    };
    let examples = render_examples(examples);
    let keywords = templates
        .render("keyword_expansion", &[("examples", &examples), ("query_str", &q)])
        .and_then(|p| call(client, "rewrite", request("keyword_expansion", p, Vec::new())));
    let keywords = match keywords {
        Ok(k) => k.trim().to_string(),
        Err(e) => {
            artifacts.expanded_query = Some(q.clone());
            return vec![format!("keyword expansion failed: {e}")];
        }
    };
    artifacts.keywords = Some(keywords.clone());
    if keywords.is_empty() {
        artifacts.expanded_query = Some(q.clone());
        return Vec::new();
    }
    let summary = templates
        .render("summary", &[("query_str", &q), ("keywords", &keywords)])
        .and_then(|p| call(client, "rewrite", request("summary", p, vec![keywords.clone()])));
    match summary {
        Ok(s) if !s.trim().is_empty() => {
            artifacts.expanded_query = Some(s.trim().to_string());
            Vec::new()
        }
        Ok(_) => {
            artifacts.expanded_query = Some(q.clone());
            Vec::new()
        }
        Err(e) => {
            artifacts.expanded_query = Some(q.clone());
            vec![format!("query summary failed: {e}")]
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HydeMode {
    #[default]
    Off,
    Direct,
    RetrievalGrounded,
}

/// Where the hypothetical document is used.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HydeUsage {
    /// Appended to the query for coarse retrieval (and reranking).
    #[default]
    Coarse,
    /// Appended to the query for reranking only.
    RerankOnly,
}

/// Generate a hypothetical answer document. `RetrievalGrounded` puts the
/// top-1 chunk retrieved for the original query into the prompt. Failures
/// leave the hypothesis absent and return a warning.
pub fn hyde(
    artifacts: &mut RewriteArtifacts,
    mode: HydeMode,
    client: &dyn ChatClient,
    templates: &TemplateSet,
    retriever: Option<&dyn Fn(&str) -> Option<Chunk>>,
    params: &GenerationParams,
) -> Vec<String> {
    let q = artifacts.original.clone();
    let (template, prompt, doc_ids) = match mode {
        HydeMode::Off => return Vec::new(),
        HydeMode::Direct => ("hyde", templates.render("hyde", &[("query_str", &q)]), Vec::new()),
        HydeMode::RetrievalGrounded => {
            let Some(retrieve) = retriever else {
                return vec!["grounded hypothesis needs a retriever; skipped".into()];
            };
            let top1 = retrieve(&q);
            let context = top1.as_ref().map(|c| c.text.as_str()).unwrap_or("");
            (
                "hyde_grounded",
                templates.render("hyde_grounded", &[("context_str", context), ("query_str", &q)]),
                top1.map(|c| vec![c.chunk_id]).unwrap_or_default(),
            )
        }
    };
    let result = prompt.and_then(|prompt| {
        call(
            client,
            "rewrite",
            ChatRequest {
                template: template.to_string(),
                prompt,
                doc_ids,
                query: q.clone(),
                attachments: Vec::new(),
                temperature: params.temperature,
                max_tokens: params.max_tokens,
            },
        )
    });
    match result {
        Ok(text) if !text.trim().is_empty() => {
            match mode {
                HydeMode::Direct => artifacts.hypothetical = Some(text),
                _ => artifacts.grounded_hypothetical = Some(text),
            }
            Vec::new()
        }
        Ok(_) => vec!["hypothesis was empty".into()],
        Err(e) => vec![format!("hypothesis generation failed: {e}")],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(id: &str, text: &str, captions: &[&str]) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: id.into(),
            text: text.into(),
            char_span: (0, text.chars().count()),
            file_path: format!("{id}.html"),
            knowledge_path: "K".into(),
            image_captions: captions.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn context_numbering_and_captions() {
        assert_eq!(build_context(&[], 6, true), "");
        let chunks = [chunk("a", "first", &["cap"]), chunk("b", "second", &[])];
        assert_eq!(
            build_context(&chunks, 6, true),
            "### Document 0: first\ncap\n### Document 1: second"
        );
        assert_eq!(
            build_context(&chunks, 6, false),
            "### Document 0: first\n### Document 1: second"
        );
        assert_eq!(build_context(&chunks, 1, true), "### Document 0: first\ncap");
    }

    #[test]
    fn render_requires_every_slot() {
        assert_eq!(render("t", "a {x} b", &[("x", "{y}")]).unwrap(), "a {y} b");
        assert!(matches!(
            render("t", "{x} {y}", &[("x", "1")]),
            Err(QaError::MissingSlot { slot, .. }) if slot == "y"
        ));
        assert_eq!(render("t", "{ not a slot", &[]).unwrap(), "{ not a slot");
    }

    #[test]
    fn normal_prompt_layout() {
        let t = TemplateSet::default();
        let p = t
            .render("normal", &[("context_str", "CTX"), ("query_str", "Q")])
            .unwrap();
        assert!(p.starts_with("The context information is as follows:\n----------\nCTX\n----------\n"));
        assert!(p.ends_with("information:\nQ\nAnswer:"));
        assert!(p.contains("respond with \"uncertain\""));
    }

    #[test]
    fn markdown_has_document_count() {
        let client = MockChatClient::new();
        let chunks = [chunk("a", "x", &[]), chunk("b", "y", &[])];
        generate_answer("q", &chunks, QaTemplate::Markdown, &TemplateSet::default(), &client, &GenerationParams::default()).unwrap();
        assert!(client.requests()[0].prompt.contains("information from 2 private domain documents"));
    }

    #[test]
    fn mock_digest_names_template_and_docs() {
        let client = MockChatClient::new();
        let chunks: Vec<Chunk> = (0..8).map(|i| chunk(&format!("c{i}"), "t", &[])).collect();
        let answer = generate_answer("what", &chunks, QaTemplate::Normal, &TemplateSet::default(), &client, &GenerationParams::default()).unwrap();
        assert_eq!(answer, "[normal] docs=c0,c1,c2,c3,c4,c5 query=what");
        assert_eq!(client.calls(), 1);
    }

    #[test]
    fn integration_and_concat() {
        let client = MockChatClient::new();
        let top = chunk("top", "TOP TEXT", &[]);
        let (merged, warn) = integrate_answer("q", "prior answer", Some(&top), &TemplateSet::default(), &client, &GenerationParams::default());
        assert!(merged.contains("prior answer"));
        assert!(warn.is_none());
        assert_eq!(client.calls(), 1);
        assert!(client.requests()[0].prompt.contains("Reference answer:\nprior answer\nNew answer:"));

        let down = MockChatClient::unavailable();
        let (kept, warn) = integrate_answer("q", "prior", Some(&top), &TemplateSet::default(), &down, &GenerationParams::default());
        assert_eq!(kept, "prior");
        assert!(warn.is_some());

        assert_eq!(document_concat("ans", "TOP"), "ans\n\nTOP");
        assert_eq!(document_concat("ans", ""), "ans");
    }

    #[test]
    fn generation_failure_carries_stage() {
        let err = generate_answer("q", &[], QaTemplate::Normal, &TemplateSet::default(), &MockChatClient::unavailable(), &GenerationParams::default()).unwrap_err();
        assert_eq!(err.stage(), "generate");
        assert!(err.is_unavailable());
    }

    #[test]
    fn overrides_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cot.txt"), "C {context_str} Q {query_str}\n").unwrap();
        let set = TemplateSet::with_overrides(dir.path()).unwrap();
        assert_eq!(set.get("cot"), "C {context_str} Q {query_str}");
        assert_eq!(set.get("normal"), NORMAL_TEMPLATE);
        std::fs::write(dir.path().join("normal.txt"), "no slots").unwrap();
        assert!(matches!(
            TemplateSet::with_overrides(dir.path()),
            Err(QaError::TemplateSlot { .. })
        ));
    }

    #[test]
    fn query_expansion() {
        let client = MockChatClient::new();
        let mut art = RewriteArtifacts::new("基站掉站怎么办");
        let warnings = expand_query(&mut art, &client, &TemplateSet::default(), &builtin_few_shot(), &GenerationParams::default());
        assert!(warnings.is_empty());
        assert_eq!(client.calls(), 2);
        let keywords = art.keywords.clone().unwrap();
        let expanded = art.expanded_query.clone().unwrap();
        assert!(expanded.contains("基站掉站怎么办"));
        assert!(expanded.contains(&keywords));
        assert!(art.expanded_text().starts_with("基站掉站怎么办\n"));

        let mut art = RewriteArtifacts::new("q");
        let warnings = expand_query(&mut art, &MockChatClient::unavailable(), &TemplateSet::default(), &[], &GenerationParams::default());
        assert_eq!(art.expanded_query.as_deref(), Some("q"));
        assert_eq!(warnings.len(), 1);
        assert_eq!(art.expanded_text(), "q");
    }

    struct Silent;

    impl ChatClient for Silent {
        fn complete(&self, _: &ChatRequest) -> Result<String, BackendError> {
            Ok("  ".into())
        }
    }

    #[test]
    fn empty_keywords_keep_query() {
        let mut art = RewriteArtifacts::new("q");
        expand_query(&mut art, &Silent, &TemplateSet::default(), &[], &GenerationParams::default());
        assert_eq!(art.expanded_query.as_deref(), Some("q"));
    }

    #[test]
    fn hyde_modes() {
        let client = MockChatClient::new();
        let t = TemplateSet::default();
        let g = GenerationParams::default();
        let mut art = RewriteArtifacts::new("why");
        assert!(hyde(&mut art, HydeMode::Direct, &client, &t, None, &g).is_empty());
        assert!(art.hypothetical.as_deref().unwrap().contains("query=why"));

        let retriever = |_: &str| Some(chunk("doc:7", "grounding text", &[]));
        let mut art = RewriteArtifacts::new("why");
        hyde(&mut art, HydeMode::RetrievalGrounded, &client, &t, Some(&retriever), &g);
        assert!(art.grounded_hypothetical.as_deref().unwrap().contains("doc:7"));
        assert!(client.requests()[1].prompt.contains("grounding text"));

        let mut art = RewriteArtifacts::new("why");
        let w = hyde(&mut art, HydeMode::Direct, &MockChatClient::unavailable(), &t, None, &g);
        assert!(art.hypothesis().is_none());
        assert_eq!(w.len(), 1);
    }
}
