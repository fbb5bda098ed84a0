//! Sentence splitting and path-independent chunk packing.
//!
//! Sizes are measured in characters of the (already normalized) body. Chunk
//! boundaries depend only on the body text, never on file or knowledge
//! paths, so re-homing a document cannot change its segmentation.

use serde::{Deserialize, Serialize};

use super::{Chunk, SourceDocument};
use crate::error::ConfigError;

pub const DEFAULT_CHUNK_SIZE: usize = 1024;
pub const DEFAULT_CHUNK_OVERLAP: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SentenceTerminators {
    /// Characters that always end a sentence.
    pub always: Vec<char>,
    /// Characters that end a sentence only when followed by whitespace or
    /// the end of text.
    pub before_whitespace: Vec<char>,
}

impl Default for SentenceTerminators {
    fn default() -> Self {
        Self {
            always: vec!['。', '！', '？', '；', '\n'],
            before_whitespace: vec!['.', '!', '?', ';'],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkingParams {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub terminators: SentenceTerminators,
}

impl Default for ChunkingParams {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_overlap: DEFAULT_CHUNK_OVERLAP,
            terminators: SentenceTerminators::default(),
        }
    }
}

impl ChunkingParams {
    pub fn new(chunk_size: usize, chunk_overlap: usize) -> Result<Self, ConfigError> {
        let p = Self {
            chunk_size,
            chunk_overlap,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.chunk_size == 0 || self.chunk_overlap >= self.chunk_size {
            return Err(ConfigError::Invalid(format!(
                "need 0 <= chunk_overlap < chunk_size, got size {} overlap {}",
                self.chunk_size, self.chunk_overlap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    /// Character offsets `[start, end)` into the source text.
    pub span: (usize, usize),
}

fn sentence_spans(chars: &[char], terms: &SentenceTerminators) -> Vec<(usize, usize)> {
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        let c = chars[i];
        let ends = terms.always.contains(&c)
            || (terms.before_whitespace.contains(&c)
                && chars.get(i + 1).map_or(true, |next| next.is_whitespace()));
        i += 1;
        if ends {
            // trailing whitespace and stacked terminators stay with the sentence
            while i < n && (chars[i].is_whitespace() || terms.always.contains(&chars[i])) {
                i += 1;
            }
            spans.push((start, i));
            start = i;
        }
    }
    if start < n {
        spans.push((start, n));
    }
    spans
}

/// Split into contiguous sentences covering the whole text. Each sentence
/// keeps its terminator and any whitespace that follows it.
pub fn split_sentences(text: &str, terms: &SentenceTerminators) -> Vec<Sentence> {
    let chars: Vec<char> = text.chars().collect();
    sentence_spans(&chars, terms)
        .into_iter()
        .map(|(s, e)| Sentence {
            text: chars[s..e].iter().collect(),
            span: (s, e),
        })
        .collect()
}

/// Sentence spans with any sentence longer than `max` cut into `max`-sized
/// pieces.
fn packing_units(chars: &[char], terms: &SentenceTerminators, max: usize) -> Vec<(usize, usize)> {
    let mut units = Vec::new();
    for (s, e) in sentence_spans(chars, terms) {
        let mut start = s;
        while e - start > max {
            units.push((start, start + max));
            start += max;
        }
        units.push((start, e));
    }
    units
}

/// Greedy chunk packing over sentences.
///
/// Sentences are appended while the chunk stays within `chunk_size`. When
/// the next sentence does not fit, the chunk is emitted and the next one
/// starts with the longest run of trailing sentences totalling at most
/// `chunk_overlap` characters, trimmed from the front until the new
/// sentence fits too.
pub fn chunk_spans(text: &str, params: &ChunkingParams) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let units = packing_units(&chars, &params.terminators, params.chunk_size);
    let len = |u: &(usize, usize)| u.1 - u.0;

    let mut spans = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut current_len = 0;
    for unit in units {
        let unit_len = len(&unit);
        if !current.is_empty() && current_len + unit_len > params.chunk_size {
            spans.push((current[0].0, current[current.len() - 1].1));
            let mut keep = 0;
            let mut kept_len = 0;
            for u in current.iter().rev() {
                if kept_len + len(u) > params.chunk_overlap {
                    break;
                }
                kept_len += len(u);
                keep += 1;
            }
            current.drain(..current.len() - keep);
            while !current.is_empty() && kept_len + unit_len > params.chunk_size {
                kept_len -= len(&current.remove(0));
            }
            current_len = kept_len;
        }
        current.push(unit);
        current_len += unit_len;
    }
    if !current.is_empty() {
        spans.push((current[0].0, current[current.len() - 1].1));
    }
    spans
}

/// Chunk a document. Output depends only on `doc.body`, `doc.doc_id` (for
/// ids) and `params`.
pub fn split_chunks(doc: &SourceDocument, params: &ChunkingParams) -> Vec<Chunk> {
    let chars: Vec<char> = doc.body.chars().collect();
    chunk_spans(&doc.body, params)
        .into_iter()
        .map(|(s, e)| Chunk {
            chunk_id: chunk_id(&doc.doc_id, s),
            doc_id: doc.doc_id.clone(),
            text: chars[s..e].iter().collect(),
            char_span: (s, e),
            file_path: doc.file_path.clone(),
            knowledge_path: doc.knowledge_path.clone(),
            image_captions: Vec::new(),
        })
        .collect()
}

pub fn chunk_id(doc_id: &str, start: usize) -> String {
    format!("{doc_id}:{start}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(body: &str, file: &str) -> SourceDocument {
        SourceDocument {
            doc_id: "d".into(),
            file_path: file.into(),
            knowledge_path: format!("K/{file}"),
            body: body.into(),
            images: vec![],
        }
    }

    fn texts(s: &[Sentence]) -> Vec<&str> {
        s.iter().map(|s| s.text.as_str()).collect()
    }

    #[test]
    fn sentence_examples() {
        let t = SentenceTerminators::default();
        assert!(split_sentences("", &t).is_empty());
        assert_eq!(texts(&split_sentences("甲。乙！", &t)), vec!["甲。", "乙！"]);
        assert_eq!(texts(&split_sentences("no terminators", &t)), vec!["no terminators"]);
        assert_eq!(
            texts(&split_sentences("Set v1.2 now. Then go!", &t)),
            vec!["Set v1.2 now. ", "Then go!"]
        );
        assert_eq!(texts(&split_sentences("行一\n行二？！\n尾", &t)), vec!["行一\n", "行二？！\n", "尾"]);
        let s = split_sentences("ab。cd", &t);
        assert_eq!(s[1].span, (3, 5));
    }

    #[test]
    fn params_validation() {
        assert!(ChunkingParams::new(1024, 200).is_ok());
        assert!(ChunkingParams::new(10, 10).is_err());
        assert!(ChunkingParams::new(0, 0).is_err());
    }

    #[test]
    fn short_body_single_chunk() {
        let d = doc("一句话。两句话。", "a.txt");
        let chunks = split_chunks(&d, &ChunkingParams::default());
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.body);
        assert_eq!(chunks[0].chunk_id, "d:0");
        assert_eq!(chunks[0].char_span, (0, 8));
    }

    #[test]
    fn path_does_not_change_chunks() {
        let body = "这是一个句子。".repeat(300);
        let p = ChunkingParams::default();
        let a = split_chunks(&doc(&body, "a.txt"), &p);
        let b = split_chunks(&doc(&body, "deep/nested/very/long/path/a.txt"), &p);
        let strip = |c: &[Chunk]| c.iter().map(|c| (c.text.clone(), c.char_span)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert!(a.len() > 1);
    }

    #[test]
    fn oversized_sentence_is_hard_split() {
        let body = "x".repeat(25);
        let p = ChunkingParams::new(10, 3).unwrap();
        let spans = chunk_spans(&body, &p);
        assert_eq!(spans, vec![(0, 10), (10, 20), (20, 25)]);
    }

    #[test]
    fn overlap_uses_whole_trailing_sentences() {
        // sentences of 4 chars each
        let body = "aaa。bbb。ccc。ddd。eee。";
        let p = ChunkingParams::new(10, 5).unwrap();
        assert_eq!(chunk_spans(body, &p), vec![(0, 8), (4, 12), (8, 16), (12, 20)]);
        let p = ChunkingParams::new(10, 3).unwrap();
        assert_eq!(chunk_spans(body, &p), vec![(0, 8), (8, 16), (16, 20)]);
    }
}
