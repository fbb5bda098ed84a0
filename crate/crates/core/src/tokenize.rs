//! Deterministic Chinese-capable tokenization.
//!
//! Text is split into runs by script: CJK ideograph runs go through a
//! dictionary-driven forward maximum matching segmenter (single-character
//! fallback for unknown spans), alphanumeric runs are lowercased, and
//! everything else (whitespace, ASCII and CJK punctuation) separates tokens.
//! Stopwords are dropped after segmentation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::error::ConfigError;

/// Small built-in stopword list of high-frequency Chinese function words and
/// English articles/prepositions.
pub const BUILTIN_STOPWORDS: &[&str] = &[
    "的", "了", "和", "是", "在", "与", "及", "或", "等", "对", "将", "把", "被", "也", "都", "就",
    "而", "之", "其", "该", "这", "那", "有", "为", "以", "于", "从", "中", "上", "下", "吗", "呢",
    "吧", "啊", "哪", "些", "个", "什", "么", "如", "何", "a", "an", "the", "of", "to", "in",
    "on", "for", "and", "or", "is", "are", "be", "by", "with", "what", "which", "how", "do",
    "does",
];

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3400..=0x4DBF
        | 0x4E00..=0x9FFF
        | 0xF900..=0xFAFF
        | 0x20000..=0x2A6DF
        | 0x2A700..=0x2EBEF
        | 0x30000..=0x3134F)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() && !is_cjk(c)
}

/// Segments one run of CJK ideographs into words.
pub trait CjkSegmenter: Send + Sync {
    fn segment(&self, run: &[char], out: &mut Vec<String>);
}

#[derive(Debug, Default, Clone)]
struct TrieNode {
    children: HashMap<char, TrieNode>,
    terminal: bool,
}

/// Forward maximum matching over a character trie built from the dictionary.
#[derive(Debug, Default, Clone)]
pub struct MaxMatchSegmenter {
    root: TrieNode,
}

impl MaxMatchSegmenter {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut root = TrieNode::default();
        for word in words {
            if word.is_empty() {
                continue;
            }
            let mut node = &mut root;
            for c in word.chars() {
                node = node.children.entry(c).or_default();
            }
            node.terminal = true;
        }
        Self { root }
    }

    /// Length in chars of the longest dictionary word starting at `run[0]`.
    fn longest_match(&self, run: &[char]) -> usize {
        let mut node = &self.root;
        let mut best = 0;
        for (i, c) in run.iter().enumerate() {
            match node.children.get(c) {
                Some(next) => {
                    node = next;
                    if node.terminal {
                        best = i + 1;
                    }
                }
                None => break,
            }
        }
        best
    }
}

impl CjkSegmenter for MaxMatchSegmenter {
    fn segment(&self, run: &[char], out: &mut Vec<String>) {
        let mut i = 0;
        while i < run.len() {
            let len = self.longest_match(&run[i..]).max(1);
            out.push(run[i..i + len].iter().collect());
            i += len;
        }
    }
}

/// Word → frequency table. Frequencies are kept for custom segmenters; the
/// maximum matching segmenter only needs membership.
pub type Dictionary = HashMap<String, u64>;

#[derive(Debug, Clone)]
pub struct TokenizerConfig {
    pub dictionary: Dictionary,
    pub stopwords: HashSet<String>,
    pub lowercase_ascii: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            dictionary: Dictionary::new(),
            stopwords: HashSet::new(),
            lowercase_ascii: true,
        }
    }
}

impl TokenizerConfig {
    pub fn with_builtin_stopwords(mut self) -> Self {
        self.stopwords
            .extend(BUILTIN_STOPWORDS.iter().map(|s| s.to_string()));
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (word, freq) in &self.dictionary {
            if word.is_empty() {
                return Err(ConfigError::Invalid("dictionary contains an empty word".into()));
            }
            if *freq == 0 {
                return Err(ConfigError::Invalid(format!(
                    "dictionary word {word:?} has frequency 0"
                )));
            }
        }
        Ok(())
    }
}

/// Immutable tokenizer, cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct Tokenizer {
    segmenter: Arc<dyn CjkSegmenter>,
    stopwords: Arc<HashSet<String>>,
    lowercase_ascii: bool,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("stopwords", &self.stopwords.len())
            .field("lowercase_ascii", &self.lowercase_ascii)
            .finish_non_exhaustive()
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new(TokenizerConfig::default())
    }
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig) -> Self {
        let segmenter = MaxMatchSegmenter::new(config.dictionary.keys().map(String::as_str));
        Self::with_segmenter(config, Arc::new(segmenter))
    }

    pub fn with_segmenter(config: TokenizerConfig, segmenter: Arc<dyn CjkSegmenter>) -> Self {
        Self {
            segmenter,
            stopwords: Arc::new(config.stopwords),
            lowercase_ascii: config.lowercase_ascii,
        }
    }

    pub fn stopwords(&self) -> &HashSet<String> {
        &self.stopwords
    }

    /// Tokenize `text`; a pure function of the text and the configuration.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let mut raw = Vec::new();
        let chars: Vec<char> = text.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if is_cjk(c) {
                let start = i;
                while i < chars.len() && is_cjk(chars[i]) {
                    i += 1;
                }
                self.segmenter.segment(&chars[start..i], &mut raw);
            } else if is_word_char(c) {
                let start = i;
                while i < chars.len() && is_word_char(chars[i]) {
                    i += 1;
                }
                let mut word: String = chars[start..i].iter().collect();
                if self.lowercase_ascii {
                    word.make_ascii_lowercase();
                }
                raw.push(word);
            } else {
                i += 1;
            }
        }
        self.filter_stopwords(raw)
    }

    pub fn filter_stopwords(&self, tokens: Vec<String>) -> Vec<String> {
        tokens
            .into_iter()
            .filter(|t| !t.is_empty() && !self.stopwords.contains(t))
            .filter(|t| t.chars().any(|c| c.is_alphanumeric()))
            .collect()
    }
}

/// Load a dictionary of `word [frequency]` lines. Duplicate words keep the
/// maximum frequency; a missing frequency counts as 1.
pub fn load_dictionary(path: impl AsRef<Path>) -> Result<Dictionary, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        source: e,
    })?;
    parse_dictionary(&text)
}

pub fn parse_dictionary(text: &str) -> Result<Dictionary, ConfigError> {
    let mut dict = Dictionary::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let freq = match fields.next() {
            Some(f) => f.parse::<u64>().map_err(|_| {
                ConfigError::Invalid(format!("dictionary line {}: bad frequency {f:?}", lineno + 1))
            })?,
            None => 1,
        };
        if freq == 0 {
            return Err(ConfigError::Invalid(format!(
                "dictionary line {}: frequency must be positive",
                lineno + 1
            )));
        }
        let slot = dict.entry(word.to_string()).or_insert(freq);
        *slot = (*slot).max(freq);
    }
    Ok(dict)
}

/// Load one stopword per line; lines are trimmed and blanks ignored.
pub fn load_stopwords(path: impl AsRef<Path>) -> Result<HashSet<String>, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
        path: path.display().to_string(),
        source: e,
    })?;
    Ok(parse_stopwords(&text))
}

pub fn parse_stopwords(text: &str) -> HashSet<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tok(dict: &[&str], stop: &[&str]) -> Tokenizer {
        Tokenizer::new(TokenizerConfig {
            dictionary: dict.iter().map(|w| (w.to_string(), 1)).collect(),
            stopwords: stop.iter().map(|w| w.to_string()).collect(),
            lowercase_ascii: true,
        })
    }

    #[test]
    fn empty_text() {
        assert!(tok(&[], &[]).tokenize("").is_empty());
    }

    #[test]
    fn forward_maximum_matching() {
        let t = tok(&["网络", "配置"], &[]);
        assert_eq!(t.tokenize("网络配置"), vec!["网络", "配置"]);
    }

    #[test]
    fn longest_word_wins() {
        let t = tok(&["网络", "网络配置", "配置"], &[]);
        assert_eq!(t.tokenize("网络配置项"), vec!["网络配置", "项"]);
    }

    #[test]
    fn single_char_fallback_and_ascii_lowercase() {
        let t = tok(&[], &["的"]);
        assert_eq!(t.tokenize("VNF 弹性!"), vec!["vnf", "弹", "性"]);
    }

    #[test]
    fn script_boundaries_split_tokens() {
        let t = tok(&[], &[]);
        assert_eq!(t.tokenize("5G网络"), vec!["5g", "网", "络"]);
        assert_eq!(t.tokenize("VNF弹性/概述"), vec!["vnf", "弹", "性", "概", "述"]);
    }

    #[test]
    fn stopwords_and_punctuation_removed() {
        let t = tok(&[], &["的", "the"]);
        assert_eq!(t.tokenize("The 网的。，!!"), vec!["网"]);
    }

    #[test]
    fn dictionary_max_merge_and_default_frequency() {
        assert!(parse_dictionary("").unwrap().is_empty());
        let d = parse_dictionary("网络 5\n网络 9").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d["网络"], 9);
        let d = parse_dictionary("配置\n").unwrap();
        assert_eq!(d["配置"], 1);
        assert!(parse_dictionary("配置 x").is_err());
    }

    #[test]
    fn stopword_parsing() {
        assert!(parse_stopwords("").is_empty());
        let s = parse_stopwords("的\n了\n");
        assert_eq!(s.len(), 2);
        assert!(s.contains("的") && s.contains("了"));
        let s = parse_stopwords("的\n  的 \n\n了");
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn unreadable_files_are_config_errors() {
        assert!(matches!(
            load_dictionary("/nonexistent/dict.txt"),
            Err(ConfigError::Read { .. })
        ));
        assert!(load_stopwords("/nonexistent/stop.txt").is_err());
    }

    proptest! {
        #[test]
        fn filtering_is_idempotent(text in "[a-z的了网络 ]{0,40}") {
            let t = tok(&["网络"], &["的", "了", "ab"]);
            let once = t.tokenize(&text);
            let twice = t.filter_stopwords(once.clone());
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn ascii_concatenation_stability(a in "[a-zA-Z0-9 ,.]{0,20}", b in "[a-zA-Z0-9 ,.]{0,20}") {
            let t = tok(&[], &["and"]);
            let joined = t.tokenize(&format!("{a} {b}"));
            let mut parts = t.tokenize(&a);
            parts.extend(t.tokenize(&b));
            prop_assert_eq!(joined, parts);
        }

        #[test]
        fn no_empty_or_stop_tokens(text in "\\PC{0,60}") {
            let t = tok(&["网络"], &["的"]);
            for token in t.tokenize(&text) {
                prop_assert!(!token.is_empty());
                prop_assert_ne!(token.as_str(), "的");
            }
        }
    }
}
