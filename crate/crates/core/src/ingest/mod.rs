//! Documentation package ingestion: manifest parsing, HTML extraction,
//! image filtering/captioning and chunking.

mod chunking;
mod html;
mod images;
mod nodetree;
mod package;
mod store;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunking::{
    chunk_id, chunk_spans, split_chunks, split_sentences, ChunkingParams, Sentence,
    SentenceTerminators, DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE,
};
pub use html::extract_document;
pub use images::{
    caption_images, filter_images, ocr_images, ChineseTextRule, ImageCaptioner, ImageFilter,
    ImageFilterConfig, OcrEngine, ReferencePatternRule, RuleMode, TitleCaptioner,
    TitleKeywordRule, DEFAULT_CAPTION_PROMPT, DEFAULT_CAPTION_PROMPT_EN,
};
pub use nodetree::{parse_node_tree, NodeEntry, NodeTree, NodeWarning};
pub use package::{Package, SidecarText};
pub use store::{read_jsonl, write_jsonl, ChunkStore, CHUNKS_FILE, DOCUMENTS_FILE, WARNINGS_FILE};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed manifest at byte {offset}: {message}")]
    Manifest { offset: usize, message: String },
    #[error("no node-tree manifest found in package")]
    MissingManifest,
    #[error("cannot decode {file}: {message}")]
    Decode { file: String, message: String },
    #[error("package has no file {0}")]
    MissingFile(String),
    #[error("archive error: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Config(#[from] crate::error::ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_path: String,
    pub title: String,
    /// Sentence of the body that precedes (and usually introduces) the image.
    pub reference_context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    /// Character offset in the body where the image appears.
    pub anchor: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub file_path: String,
    pub knowledge_path: String,
    pub body: String,
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub text: String,
    pub char_span: (usize, usize),
    pub file_path: String,
    pub knowledge_path: String,
    #[serde(default)]
    pub image_captions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub file: String,
    pub message: String,
}

impl IngestWarning {
    pub fn new(file: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            file: file.into(),
            message: message.into(),
        }
    }
}

/// Resolve `target` relative to the directory of `base_file`, normalizing
/// `.` and `..` segments. Absolute URLs and data URIs are returned as-is.
pub fn resolve_relative(base_file: &str, target: &str) -> String {
    if target.contains("://") || target.starts_with("data:") {
        return target.to_string();
    }
    let target = target.split(['?', '#']).next().unwrap_or(target);
    let mut parts: Vec<&str> = if target.starts_with('/') {
        Vec::new()
    } else {
        base_file.split('/').collect()
    };
    if !target.starts_with('/') {
        parts.pop();
    }
    for seg in target.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            s => parts.push(s),
        }
    }
    parts.retain(|p| !p.is_empty());
    parts.join("/")
}

pub struct IngestOptions {
    pub chunking: ChunkingParams,
    pub image_filter: ImageFilter,
    pub caption_prompt: String,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            chunking: ChunkingParams::default(),
            image_filter: ImageFilter::default(),
            caption_prompt: DEFAULT_CAPTION_PROMPT.to_string(),
        }
    }
}

#[derive(Default)]
pub struct Backends<'a> {
    pub ocr: Option<&'a dyn OcrEngine>,
    pub captioner: Option<&'a dyn ImageCaptioner>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOutput {
    pub documents: Vec<SourceDocument>,
    pub chunks: Vec<Chunk>,
    pub warnings: Vec<IngestWarning>,
}

/// Attach captions of retained images to the first chunk containing the
/// image anchor.
fn attach_captions(chunks: &mut [Chunk], images: &[ImageRef]) {
    for img in images {
        let Some(caption) = img.caption.as_deref().filter(|c| !c.trim().is_empty()) else {
            continue;
        };
        let target = chunks
            .iter()
            .position(|c| c.char_span.0 <= img.anchor && img.anchor < c.char_span.1)
            .or_else(|| chunks.len().checked_sub(1));
        if let Some(i) = target {
            chunks[i].image_captions.push(caption.to_string());
        }
    }
}

fn process_document(
    entry: &NodeEntry,
    file_path: &str,
    doc_id: &str,
    bytes: &[u8],
    opts: &IngestOptions,
    backends: &Backends<'_>,
) -> Result<(SourceDocument, Vec<Chunk>, Vec<IngestWarning>), IngestError> {
    let mut doc = extract_document(bytes, doc_id, &entry.knowledge_path, file_path)?;
    let mut warnings = Vec::new();
    let mut imgs = std::mem::take(&mut doc.images);
    if let Some(ocr) = backends.ocr {
        let (out, w) = ocr_images(imgs, ocr, file_path);
        imgs = out;
        warnings.extend(w);
    }
    imgs = filter_images(imgs, &opts.image_filter);
    if let Some(captioner) = backends.captioner {
        let (out, w) = caption_images(imgs, captioner, &opts.caption_prompt, file_path);
        imgs = out;
        warnings.extend(w);
    }
    doc.images = imgs;
    let mut chunks = split_chunks(&doc, &opts.chunking);
    attach_captions(&mut chunks, &doc.images);
    Ok((doc, chunks, warnings))
}

/// Ingest a whole package. Documents are processed in parallel; output order
/// follows the manifest. Any undecodable page aborts the run.
pub fn ingest_package(
    package: &Package,
    opts: &IngestOptions,
    backends: &Backends<'_>,
) -> Result<IngestOutput, IngestError> {
    opts.chunking.validate()?;
    let (manifest_path, manifest) = package.manifest().ok_or(IngestError::MissingManifest)?;
    let base = manifest_path.rsplit_once('/').map_or("", |(dir, _)| dir);
    let tree = parse_node_tree(manifest)?;

    let mut warnings: Vec<IngestWarning> = tree
        .warnings
        .iter()
        .map(|w| IngestWarning::new(manifest_path, format!("{}: {}", w.node, w.message)))
        .collect();

    let mut seen = HashSet::new();
    let mut jobs = Vec::new();
    for entry in &tree.entries {
        let file_path = if base.is_empty() {
            resolve_relative("", &entry.file_path)
        } else {
            resolve_relative(&format!("{base}/"), &entry.file_path)
        };
        let Some(bytes) = package.get(&file_path) else {
            warnings.push(IngestWarning::new(
                &file_path,
                format!("listed in manifest under {} but missing", entry.knowledge_path),
            ));
            continue;
        };
        let mut doc_id = file_path.clone();
        let mut n = 1;
        while !seen.insert(doc_id.clone()) {
            n += 1;
            doc_id = format!("{file_path}#{n}");
        }
        jobs.push((entry, file_path, doc_id, bytes));
    }

    let results: Vec<_> = jobs
        .par_iter()
        .map(|(entry, file_path, doc_id, bytes)| {
            process_document(entry, file_path, doc_id, bytes, opts, backends)
        })
        .collect();

    let mut out = IngestOutput {
        warnings,
        ..Default::default()
    };
    for result in results {
        let (doc, chunks, w) = result?;
        out.documents.push(doc);
        out.chunks.extend(chunks);
        out.warnings.extend(w);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_resolution() {
        assert_eq!(resolve_relative("a/b/page.html", "../img/x.png"), "a/img/x.png");
        assert_eq!(resolve_relative("page.html", "./x.png"), "x.png");
        assert_eq!(resolve_relative("a/page.html", "x.png?v=1"), "a/x.png");
        assert_eq!(resolve_relative("a/page.html", "/root.png"), "root.png");
        assert_eq!(resolve_relative("a/", "p.html"), "a/p.html");
        assert_eq!(resolve_relative("a/p.html", "http://x/y.png"), "http://x/y.png");
    }

    fn package() -> Package {
        let mut p = Package::default();
        p.insert(
            "pkg/nodetree.xml",
            r#"<nodetree><node title="产品"><node title="组网" file="docs/net.html"/><node title="缺失" file="docs/none.html"/><node title="告警" file="docs/alarm.html"/></node></nodetree>"#,
        );
        p.insert(
            "pkg/docs/net.html",
            "<p>典型组网如图1所示。</p><figure><img src=\"../img/net.png\"><figcaption>图1 组网图</figcaption></figure><p>后续说明。</p>",
        );
        p.insert("pkg/img/net.png.ocr.txt", "基站 核心网");
        p.insert("pkg/img/net.png.caption.txt", "一张展示基站与核心网连接的组网图");
        p.insert("pkg/docs/alarm.html", "<p>告警分为紧急、重要、次要和提示四级。</p>");
        p
    }

    #[test]
    fn package_end_to_end() {
        let pkg = package();
        let sidecar = SidecarText::new(&pkg);
        let backends = Backends {
            ocr: Some(&sidecar),
            captioner: Some(&sidecar),
        };
        let out = ingest_package(&pkg, &IngestOptions::default(), &backends).unwrap();
        assert_eq!(out.documents.len(), 2);
        assert_eq!(out.documents[0].doc_id, "pkg/docs/net.html");
        assert_eq!(out.documents[0].knowledge_path, "产品/组网");
        assert_eq!(out.documents[1].knowledge_path, "产品/告警");
        assert_eq!(out.documents[0].images.len(), 1);
        assert_eq!(out.chunks.len(), 2);
        assert_eq!(out.chunks[0].image_captions, vec!["一张展示基站与核心网连接的组网图"]);
        // captions never leak into chunk text
        assert!(!out.chunks[0].text.contains("连接的组网图"));
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].file.ends_with("none.html"));

        let again = ingest_package(&pkg, &IngestOptions::default(), &backends).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn undecodable_page_aborts() {
        let mut pkg = package();
        pkg.insert_bytes("pkg/docs/alarm.html", vec![0xff, 0xfe, 0xfd]);
        let err = ingest_package(&pkg, &IngestOptions::default(), &Backends::default()).unwrap_err();
        assert!(matches!(err, IngestError::Decode { ref file, .. } if file == "pkg/docs/alarm.html"));
    }

    #[test]
    fn missing_manifest() {
        let mut pkg = Package::default();
        pkg.insert("a.html", "<p>x</p>");
        assert!(matches!(
            ingest_package(&pkg, &IngestOptions::default(), &Backends::default()),
            Err(IngestError::MissingManifest)
        ));
    }
}
