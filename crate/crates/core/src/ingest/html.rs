//! Plain-text extraction from HTML documentation pages.

use scraper::{ElementRef, Html, Node};
use unicode_normalization::UnicodeNormalization;

use super::chunking::{split_sentences, SentenceTerminators};
use super::{resolve_relative, ImageRef, IngestError, SourceDocument};

const SKIPPED: &[&str] = &["script", "style", "noscript", "head", "template", "svg", "iframe", "object"];

const BLOCKS: &[&str] = &[
    "address", "article", "aside", "blockquote", "caption", "center", "dd", "details", "dialog",
    "div", "dl", "dt", "fieldset", "figcaption", "figure", "footer", "form", "h1", "h2", "h3",
    "h4", "h5", "h6", "header", "hr", "main", "nav", "ol", "p", "pre", "section", "summary",
    "table", "tbody", "tfoot", "thead", "ul", "body", "html",
];

struct TextBuilder {
    lines: Vec<String>,
    current: String,
    /// Character length of `lines.join("\n")`.
    emitted_chars: usize,
}

impl TextBuilder {
    fn new() -> Self {
        Self {
            lines: Vec::new(),
            current: String::new(),
            emitted_chars: 0,
        }
    }

    fn push_text(&mut self, text: &str) {
        for c in text.chars() {
            if c.is_whitespace() {
                if !self.current.is_empty() && !self.current.ends_with(' ') {
                    self.current.push(' ');
                }
            } else {
                self.current.push(c);
            }
        }
    }

    fn break_line(&mut self) {
        let line = self.current.trim();
        if !line.is_empty() {
            let len = line.chars().count();
            self.emitted_chars += len + usize::from(!self.lines.is_empty());
            self.lines.push(line.to_string());
        }
        self.current.clear();
    }

    /// Character offset in the final body where the next text lands.
    fn position(&self) -> usize {
        let pending = self.current.trim_start().chars().count();
        if pending > 0 || !self.lines.is_empty() {
            self.emitted_chars + usize::from(!self.lines.is_empty()) + pending
        } else {
            0
        }
    }

    fn finish(mut self) -> String {
        self.break_line();
        self.lines.join("\n")
    }
}

struct Extractor<'a> {
    out: TextBuilder,
    images: Vec<(ImageRef, usize)>,
    file_path: &'a str,
}

fn inline_text(el: ElementRef<'_>) -> String {
    let mut b = TextBuilder::new();
    collect_inline(el, &mut b);
    b.finish().replace('\n', " ")
}

fn collect_inline(el: ElementRef<'_>, b: &mut TextBuilder) {
    for child in el.children() {
        match child.value() {
            Node::Text(t) => b.push_text(t),
            Node::Element(e) if SKIPPED.contains(&e.name()) => {}
            Node::Element(_) => {
                if let Some(c) = ElementRef::wrap(child) {
                    b.push_text(" ");
                    collect_inline(c, b);
                    b.push_text(" ");
                }
            }
            _ => {}
        }
    }
}

impl Extractor<'_> {
    fn walk(&mut self, el: ElementRef<'_>) {
        for child in el.children() {
            match child.value() {
                Node::Text(t) => self.out.push_text(t),
                Node::Element(_) => {
                    if let Some(c) = ElementRef::wrap(child) {
                        self.element(c);
                    }
                }
                _ => {}
            }
        }
    }

    fn element(&mut self, el: ElementRef<'_>) {
        let name = el.value().name();
        if SKIPPED.contains(&name) {
            return;
        }
        match name {
            "br" => self.out.break_line(),
            "img" => self.image(el),
            "tr" => {
                self.out.break_line();
                let cells: Vec<String> = el
                    .child_elements()
                    .filter(|c| matches!(c.value().name(), "td" | "th"))
                    .map(|c| inline_text(c).trim().to_string())
                    .collect();
                if cells.iter().any(|c| !c.is_empty()) {
                    self.out.push_text(&format!("| {} |", cells.join(" | ")));
                }
                // images inside table cells still need records
                for img in el.descendent_elements().filter(|d| d.value().name() == "img") {
                    self.image(img);
                }
                self.out.break_line();
            }
            "li" => {
                self.out.break_line();
                self.out.push_text("- ");
                self.walk(el);
                self.out.break_line();
            }
            _ if BLOCKS.contains(&name) => {
                self.out.break_line();
                self.walk(el);
                self.out.break_line();
            }
            _ => self.walk(el),
        }
    }

    fn image(&mut self, el: ElementRef<'_>) {
        let Some(src) = el.value().attr("src").map(str::trim).filter(|s| !s.is_empty()) else {
            return;
        };
        let figure_caption = el
            .ancestors()
            .filter_map(ElementRef::wrap)
            .find(|a| a.value().name() == "figure")
            .and_then(|fig| {
                fig.descendent_elements()
                    .find(|d| d.value().name() == "figcaption")
                    .map(inline_text)
            });
        let title = figure_caption
            .or_else(|| el.value().attr("alt").map(str::to_string))
            .or_else(|| el.value().attr("title").map(str::to_string))
            .unwrap_or_default();
        let image = ImageRef {
            image_path: resolve_relative(self.file_path, src),
            title: title.split_whitespace().collect::<Vec<_>>().join(" "),
            reference_context: String::new(),
            extracted_text: None,
            caption: None,
            anchor: 0,
        };
        let position = self.out.position();
        self.images.push((image, position));
    }
}

/// Extract visible text and image references from one HTML page.
///
/// Block elements become separate lines, table rows become `| a | b |`
/// lines, list items `- item` lines. Script and style content is dropped.
/// The body is NFC-normalized.
pub fn extract_document(
    html: &[u8],
    doc_id: &str,
    knowledge_path: &str,
    file_path: &str,
) -> Result<SourceDocument, IngestError> {
    let text = std::str::from_utf8(html).map_err(|e| IngestError::Decode {
        file: file_path.to_string(),
        message: e.to_string(),
    })?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let dom = Html::parse_document(text);
    let mut ex = Extractor {
        out: TextBuilder::new(),
        images: Vec::new(),
        file_path,
    };
    ex.walk(dom.root_element());
    let Extractor { out, images, .. } = ex;
    let raw_body = out.finish();
    let body: String = raw_body.nfc().collect();
    // NFC can shorten the text; rescale anchors through a char prefix map
    let same_len = body.chars().count() == raw_body.chars().count();
    let images = images
        .into_iter()
        .map(|(mut img, pos)| {
            let anchor = if same_len {
                pos
            } else {
                raw_body.chars().take(pos).collect::<String>().nfc().count()
            };
            img.anchor = anchor.min(body.chars().count());
            img.title = img.title.nfc().collect();
            img.reference_context = reference_sentence(&body, img.anchor);
            img
        })
        .collect();
    Ok(SourceDocument {
        doc_id: doc_id.to_string(),
        file_path: file_path.to_string(),
        knowledge_path: knowledge_path.to_string(),
        body,
        images,
    })
}

/// The last non-blank sentence before `anchor`.
fn reference_sentence(body: &str, anchor: usize) -> String {
    let before: String = body.chars().take(anchor).collect();
    split_sentences(&before, &SentenceTerminators::default())
        .into_iter()
        .rev()
        .map(|s| s.text.trim().to_string())
        .find(|s| !s.is_empty())
        .unwrap_or_default()
}
