//! Okapi BM25 with eagerly precomputed per-term contributions.
//!
//! At build time every (term, document) pair gets its full BM25 contribution
//! `idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len_d / avg_len))`, so a
//! query only sums postings of its own terms. The IDF uses the `+1 inside ln`
//! form and is therefore never negative: a document scores above zero exactly
//! when it matches at least one query term.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::IndexError;
use crate::hit::{rerank_positions, ExpansionMode, Route, ScoredHit, SourceFilter};
use crate::ingest::Chunk;
use crate::tokenize::Tokenizer;

pub const DEFAULT_CHUNK_TOP_K: usize = 192;
pub const DEFAULT_PATH_TOP_K: usize = 6;

const SNAPSHOT_FORMAT: &str = "docqa-bm25";
const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.5, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), IndexError> {
        if !(self.k1 > 0.0) || !(0.0..=1.0).contains(&self.b) {
            return Err(IndexError::InvalidParams {
                k1: self.k1,
                b: self.b,
            });
        }
        Ok(())
    }
}

pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
}

/// One posting: document ordinal and that document's precomputed contribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posting(pub u32, pub f64);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_len: Vec<u32>,
    avg_len: f64,
    /// Sorted vocabulary; term ids are positions in this list.
    terms: Vec<String>,
    idf: Vec<f64>,
    postings: Vec<Vec<Posting>>,
    #[serde(skip)]
    term_ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot<T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

impl Bm25Index {
    /// Build over `(doc_id, tokens)` pairs. Document ordinals follow input order.
    pub fn build<S: AsRef<str>>(
        corpus: &[(String, Vec<S>)],
        params: Bm25Params,
    ) -> Result<Self, IndexError> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        let n = corpus.len();
        let doc_len: Vec<u32> = corpus.iter().map(|(_, t)| t.len() as u32).collect();
        let total: u64 = doc_len.iter().map(|&l| l as u64).sum();
        let avg_len = total as f64 / n as f64;

        // term -> [(doc, tf)] in document order
        let mut tfs: BTreeMap<&str, Vec<(u32, u32)>> = BTreeMap::new();
        for (ordinal, (_, tokens)) in corpus.iter().enumerate() {
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in tokens {
                *counts.entry(t.as_ref()).or_default() += 1;
            }
            for (term, tf) in counts {
                tfs.entry(term).or_default().push((ordinal as u32, tf));
            }
        }

        let Bm25Params { k1, b } = params;
        let mut terms = Vec::with_capacity(tfs.len());
        let mut idfs = Vec::with_capacity(tfs.len());
        let mut postings = Vec::with_capacity(tfs.len());
        for (term, docs) in tfs {
            let w = idf(n, docs.len());
            let list = docs
                .into_iter()
                .map(|(d, tf)| {
                    let tf = tf as f64;
                    let norm = 1.0 - b + b * doc_len[d as usize] as f64 / avg_len;
                    Posting(d, w * tf * (k1 + 1.0) / (tf + k1 * norm))
                })
                .collect();
            terms.push(term.to_string());
            idfs.push(w);
            postings.push(list);
        }

        let mut index = Self {
            params,
            doc_ids: corpus.iter().map(|(id, _)| id.clone()).collect(),
            doc_len,
            avg_len,
            terms,
            idf: idfs,
            postings,
            term_ids: HashMap::new(),
        };
        index.rebuild_term_ids();
        Ok(index)
    }

    fn rebuild_term_ids(&mut self) {
        self.term_ids = self
            .terms
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_len(&self) -> &[u32] {
        &self.doc_len
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn vocabulary_size(&self) -> usize {
        self.terms.len()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.term_ids.get(term).map(|&i| self.idf[i as usize])
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.term_ids
            .get(term)
            .map(|&i| self.postings[i as usize].as_slice())
    }

    /// Scores for every document; mainly useful for tests and small corpora.
    pub fn score_all<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let mut scores = vec![0.0; self.doc_count()];
        for term in query {
            if let Some(list) = self.postings(term.as_ref()) {
                for &Posting(d, s) in list {
                    scores[d as usize] += s;
                }
            }
        }
        scores
    }

    /// Top documents as `(ordinal, score)` with score strictly above
    /// `min_score`, ordered by score descending then ordinal ascending.
    /// Repeated query terms contribute once per occurrence.
    pub fn search<S: AsRef<str>>(
        &self,
        query: &[S],
        top_k: usize,
        min_score: f64,
    ) -> Vec<(usize, f64)> {
        if top_k == 0 {
            return Vec::new();
        }
        let mut scores = vec![0.0f64; self.doc_count()];
        let mut touched: Vec<u32> = Vec::new();
        for term in query {
            let Some(list) = self.postings(term.as_ref()) else {
                continue;
            };
            for &Posting(d, s) in list {
                let slot = &mut scores[d as usize];
                if *slot == 0.0 {
                    touched.push(d);
                }
                *slot += s;
            }
        }
        let mut hits: Vec<(usize, f64)> = touched
            .into_iter()
            .filter_map(|d| {
                let s = scores[d as usize];
                // mark consumed so duplicates in `touched` are skipped
                scores[d as usize] = f64::NEG_INFINITY;
                (s > min_score).then_some((d as usize, s))
            })
            .collect();
        let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
        if hits.len() > top_k {
            hits.select_nth_unstable_by(top_k - 1, by_rank);
            hits.truncate(top_k);
        }
        hits.sort_unstable_by(by_rank);
        hits
    }

    pub fn retrieve<S: AsRef<str>>(
        &self,
        query: &[S],
        top_k: usize,
        min_score: f64,
        route: Route,
    ) -> Vec<ScoredHit> {
        self.search(query, top_k, min_score)
            .into_iter()
            .enumerate()
            .map(|(i, (d, score))| ScoredHit {
                chunk_id: self.doc_ids[d].clone(),
                score,
                rank: i + 1,
                route,
            })
            .collect()
    }

    pub fn write_snapshot(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let mut out = BufWriter::new(File::create(path)?);
        serde_json::to_writer(
            &mut out,
            &Snapshot {
                format: SNAPSHOT_FORMAT.into(),
                version: SNAPSHOT_VERSION,
                body: self,
            },
        )
        .map_err(|e| IndexError::Snapshot(e.to_string()))?;
        out.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let reader = BufReader::new(File::open(path)?);
        let snap: Snapshot<Bm25Index> =
            serde_json::from_reader(reader).map_err(|e| IndexError::Snapshot(e.to_string()))?;
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(IndexError::Snapshot(format!(
                "unsupported snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        let mut index = snap.body;
        if index.terms.len() != index.postings.len()
            || index.terms.len() != index.idf.len()
            || index.doc_ids.len() != index.doc_len.len()
        {
            return Err(IndexError::Snapshot("inconsistent table sizes".into()));
        }
        index.rebuild_term_ids();
        Ok(index)
    }
}

/// Reference scorer that walks every document for every query; the
/// baseline the eager index is benchmarked against.
#[derive(Debug, Clone)]
pub struct NaiveBm25 {
    params: Bm25Params,
    doc_tf: Vec<HashMap<String, u32>>,
    doc_len: Vec<usize>,
    avg_len: f64,
    idf: HashMap<String, f64>,
}

impl NaiveBm25 {
    pub fn new<S: AsRef<str>>(corpus: &[Vec<S>], params: Bm25Params) -> Self {
        let mut doc_tf = Vec::with_capacity(corpus.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in doc {
                *tf.entry(t.as_ref().to_string()).or_default() += 1;
            }
            for term in tf.keys() {
                *df.entry(term.clone()).or_default() += 1;
            }
            doc_tf.push(tf);
        }
        let doc_len: Vec<usize> = corpus.iter().map(Vec::len).collect();
        let avg_len = doc_len.iter().sum::<usize>() as f64 / corpus.len().max(1) as f64;
        let n = corpus.len();
        let idf = df.into_iter().map(|(t, c)| (t, idf(n, c))).collect();
        Self {
            params,
            doc_tf,
            doc_len,
            avg_len,
            idf,
        }
    }

    pub fn scores<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        (0..self.doc_tf.len())
            .map(|d| {
                let mut score = 0.0;
                for q in query {
                    let q = q.as_ref();
                    let tf = self.doc_tf[d].get(q).copied().unwrap_or(0) as f64;
                    if tf == 0.0 {
                        continue;
                    }
                    let w = self.idf.get(q).copied().unwrap_or(0.0);
                    let norm = 1.0 - b + b * self.doc_len[d] as f64 / self.avg_len;
                    score += w * tf * (k1 + 1.0) / (tf + k1 * norm);
                }
                score
            })
            .collect()
    }

    pub fn search<S: AsRef<str>>(&self, query: &[S], top_k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .scores(query)
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        ranked
    }
}

/// Chunk text with the path metadata selected by `mode` prepended.
pub fn expand_document(chunk: &Chunk, mode: ExpansionMode) -> String {
    match mode {
        ExpansionMode::None => chunk.text.clone(),
        ExpansionMode::FilePath => format!("{}\n{}", chunk.file_path, chunk.text),
        ExpansionMode::KnowledgePath => format!("{}\n{}", chunk.knowledge_path, chunk.text),
    }
}

/// Index chunk texts (expanded per `mode`); document ids are chunk ids.
pub fn build_chunk_index(
    chunks: &[Chunk],
    mode: ExpansionMode,
    tokenizer: &Tokenizer,
    params: Bm25Params,
) -> Result<Bm25Index, IndexError> {
    let corpus: Vec<(String, Vec<String>)> = chunks
        .iter()
        .map(|c| {
            (
                c.chunk_id.clone(),
                tokenizer.tokenize(&expand_document(c, mode)),
            )
        })
        .collect();
    Bm25Index::build(&corpus, params)
}

/// Text-block route: BM25 over (expanded) chunks, hits with score > 0.
pub fn chunk_route<S: AsRef<str>>(index: &Bm25Index, query: &[S], top_k: usize) -> Vec<ScoredHit> {
    index.retrieve(query, top_k, 0.0, Route::ChunkRoute)
}

/// Knowledge-path route: one indexed document per distinct knowledge path.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathIndex {
    index: Bm25Index,
    /// Chunk ids under each path, in document order.
    members: Vec<Vec<String>>,
}

impl PathIndex {
    pub fn build(
        chunks: &[Chunk],
        tokenizer: &Tokenizer,
        params: Bm25Params,
    ) -> Result<Self, IndexError> {
        let mut order: Vec<&str> = Vec::new();
        let mut members: HashMap<&str, Vec<String>> = HashMap::new();
        for c in chunks {
            let entry = members.entry(c.knowledge_path.as_str()).or_insert_with(|| {
                order.push(c.knowledge_path.as_str());
                Vec::new()
            });
            entry.push(c.chunk_id.clone());
        }
        let corpus: Vec<(String, Vec<String>)> = order
            .iter()
            .map(|p| (p.to_string(), tokenizer.tokenize(p)))
            .collect();
        let index = Bm25Index::build(&corpus, params)?;
        let members = order
            .iter()
            .map(|p| members.remove(p).unwrap_or_default())
            .collect();
        Ok(Self { index, members })
    }

    pub fn path_count(&self) -> usize {
        self.index.doc_count()
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    /// Matched paths in score order, each expanded to its chunks in document
    /// order, until `top_k` chunks are emitted. Chunk hits carry their path's
    /// score.
    pub fn route<S: AsRef<str>>(&self, query: &[S], top_k: usize) -> Vec<ScoredHit> {
        let mut hits = Vec::new();
        if top_k == 0 {
            return hits;
        }
        for (ordinal, score) in self.index.search(query, self.path_count(), 0.0) {
            for chunk_id in &self.members[ordinal] {
                hits.push(ScoredHit {
                    chunk_id: chunk_id.clone(),
                    score,
                    rank: hits.len() + 1,
                    route: Route::PathRoute,
                });
                if hits.len() == top_k {
                    return hits;
                }
            }
        }
        hits
    }
}

/// Keep hits whose chunk file path passes `filter`, preserving order and
/// recomputing ranks. Hits with no known file path are dropped unless the
/// filter allows everything.
pub fn filter_by_source<'a>(
    hits: Vec<ScoredHit>,
    filter: &SourceFilter,
    file_path_of: impl Fn(&str) -> Option<&'a str>,
) -> Vec<ScoredHit> {
    if *filter == SourceFilter::All {
        return hits;
    }
    let mut kept: Vec<ScoredHit> = hits
        .into_iter()
        .filter(|h| file_path_of(&h.chunk_id).is_some_and(|p| filter.allows(p)))
        .collect();
    rerank_positions(&mut kept);
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[&str]) -> Vec<(String, Vec<String>)> {
        docs.iter()
            .enumerate()
            .map(|(i, d)| {
                (
                    format!("d{}", i + 1),
                    d.split_whitespace().map(str::to_string).collect(),
                )
            })
            .collect()
    }

    fn chunk(id: &str, file: &str, kp: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: id.into(),
            text: text.into(),
            char_span: (0, text.chars().count()),
            file_path: file.into(),
            knowledge_path: kp.into(),
            image_captions: vec![],
        }
    }

    #[test]
    fn empty_corpus_rejected() {
        let empty: Vec<(String, Vec<String>)> = vec![];
        assert!(matches!(
            Bm25Index::build(&empty, Bm25Params::default()),
            Err(IndexError::EmptyCorpus)
        ));
        assert!(Bm25Index::build(&corpus(&["a"]), Bm25Params { k1: 0.0, b: 0.5 }).is_err());
        assert!(Bm25Index::build(&corpus(&["a"]), Bm25Params { k1: 1.0, b: 1.5 }).is_err());
    }

    #[test]
    fn single_doc_idf() {
        let idx = Bm25Index::build(&corpus(&["a b c"]), Bm25Params::default()).unwrap();
        // N=1, n=1: (1 - 1 + 0.5) / (1 + 0.5) + 1 = 4/3
        let expected = (4.0f64 / 3.0).ln();
        for t in ["a", "b", "c"] {
            assert!((idx.idf(t).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn idf_of_term_in_every_doc() {
        let idx = Bm25Index::build(&corpus(&["x a", "x b", "x c"]), Bm25Params::default()).unwrap();
        let expected = (0.5f64 / 3.5 + 1.0).ln();
        assert!((idx.idf("x").unwrap() - expected).abs() < 1e-15);
        assert_eq!(idx.postings("x").unwrap().len(), 3);
        assert_eq!(idx.postings("a").unwrap().len(), 1);
    }

    #[test]
    fn b_zero_ignores_length() {
        let idx = Bm25Index::build(
            &corpus(&["a", "a b c d e f"]),
            Bm25Params { k1: 1.5, b: 0.0 },
        )
        .unwrap();
        let p = idx.postings("a").unwrap();
        assert_eq!(p[0].1, p[1].1);
    }

    #[test]
    fn avg_len_is_exact_mean() {
        let idx = Bm25Index::build(&corpus(&["a b", "a", "c c c c"]), Bm25Params::default()).unwrap();
        assert_eq!(idx.avg_len(), 7.0 / 3.0);
    }

    #[test]
    fn shorter_doc_ranks_first() {
        let idx = Bm25Index::build(&corpus(&["a b", "a"]), Bm25Params::default()).unwrap();
        let hits = idx.retrieve(&["a"], 10, 0.0, Route::ChunkRoute);
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].chunk_id, "d2");
        assert_eq!(hits[1].chunk_id, "d1");
        assert!(hits[0].score > hits[1].score);
        // hand computation: avg_len = 1.5, idf = ln(0.5/2.5 + 1)
        let w = (0.2f64 + 1.0).ln();
        let d1 = w * 2.5 / (1.0 + 1.5 * (0.25 + 0.75 * 2.0 / 1.5));
        let d2 = w * 2.5 / (1.0 + 1.5 * (0.25 + 0.75 * 1.0 / 1.5));
        assert!((hits[0].score - d2).abs() < 1e-12);
        assert!((hits[1].score - d1).abs() < 1e-12);
    }

    #[test]
    fn unmatched_query_is_empty() {
        let idx = Bm25Index::build(&corpus(&["a b", "a"]), Bm25Params::default()).unwrap();
        assert!(idx.retrieve(&["zzz"], 10, 0.0, Route::ChunkRoute).is_empty());
        assert!(idx.retrieve::<&str>(&[], 10, 0.0, Route::ChunkRoute).is_empty());
    }

    #[test]
    fn ties_break_by_ordinal_and_top_k_cuts() {
        let idx = Bm25Index::build(&corpus(&["a", "b", "a", "a"]), Bm25Params::default()).unwrap();
        let hits = idx.search(&["a"], 2, 0.0);
        assert_eq!(hits.iter().map(|h| h.0).collect::<Vec<_>>(), vec![0, 2]);
        assert!(idx.search(&["a"], 0, 0.0).is_empty());
    }

    #[test]
    fn repeated_query_terms_count_twice() {
        let idx = Bm25Index::build(&corpus(&["a", "b"]), Bm25Params::default()).unwrap();
        let once = idx.search(&["a"], 1, 0.0)[0].1;
        let twice = idx.search(&["a", "a"], 1, 0.0)[0].1;
        assert!((twice - 2.0 * once).abs() < 1e-12);
    }

    #[test]
    fn eager_matches_naive() {
        let docs = corpus(&["a b c a", "b c", "c d e", "a a a", "e"]);
        let idx = Bm25Index::build(&docs, Bm25Params::default()).unwrap();
        let naive = NaiveBm25::new(
            &docs.iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
            Bm25Params::default(),
        );
        for q in [vec!["a"], vec!["a", "c"], vec!["e", "d", "x"]] {
            let e = idx.score_all(&q);
            let n = naive.scores(&q);
            for (x, y) in e.iter().zip(&n) {
                assert!((x - y).abs() < 1e-12);
            }
            assert_eq!(idx.search(&q, 3, 0.0), naive.search(&q, 3));
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.json");
        let idx = Bm25Index::build(&corpus(&["a b", "b c"]), Bm25Params::default()).unwrap();
        idx.write_snapshot(&path).unwrap();
        let back = Bm25Index::read_snapshot(&path).unwrap();
        assert_eq!(back.search(&["b"], 5, 0.0), idx.search(&["b"], 5, 0.0));
        std::fs::write(&path, r#"{"format":"other","version":1}"#).unwrap();
        assert!(Bm25Index::read_snapshot(&path).is_err());
    }

    #[test]
    fn expansion_modes() {
        let c = chunk("c1", "docs/a.html", "A/B", "t");
        assert_eq!(expand_document(&c, ExpansionMode::None), "t");
        assert_eq!(expand_document(&c, ExpansionMode::KnowledgePath), "A/B\nt");
        assert_eq!(expand_document(&c, ExpansionMode::FilePath), "docs/a.html\nt");
    }

    #[test]
    fn expanded_path_tokens_are_retrievable() {
        let tok = Tokenizer::default();
        let chunks = vec![
            chunk("c1", "a.html", "Alarm/Overview", "general text"),
            chunk("c2", "b.html", "Charging/Overview", "general text"),
        ];
        let plain = build_chunk_index(&chunks, ExpansionMode::None, &tok, Bm25Params::default()).unwrap();
        let q = tok.tokenize("charging");
        assert!(chunk_route(&plain, &q, 10).is_empty());
        let expanded =
            build_chunk_index(&chunks, ExpansionMode::KnowledgePath, &tok, Bm25Params::default()).unwrap();
        let hits = chunk_route(&expanded, &q, 10);
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].chunk_id, "c2");
    }

    #[test]
    fn chunk_route_empty_query() {
        let tok = Tokenizer::default();
        let chunks = vec![chunk("c1", "a", "A", "x y")];
        let idx = build_chunk_index(&chunks, ExpansionMode::None, &tok, Bm25Params::default()).unwrap();
        assert!(chunk_route(&idx, &tok.tokenize(""), DEFAULT_CHUNK_TOP_K).is_empty());
    }

    #[test]
    fn path_route_matches_knowledge_path() {
        let tok = Tokenizer::default();
        let chunks = vec![
            chunk("c1", "a.html", "VNF弹性/概述", "one"),
            chunk("c2", "a.html", "VNF弹性/概述", "two"),
            chunk("c3", "b.html", "告警/管理", "three"),
            chunk("c4", "c.html", "VNF弹性/流程", "four"),
        ];
        let idx = PathIndex::build(&chunks, &tok, Bm25Params::default()).unwrap();
        assert_eq!(idx.path_count(), 3);
        let hits = idx.route(&tok.tokenize("VNF 弹性 概述"), DEFAULT_PATH_TOP_K);
        let ids: Vec<&str> = hits.iter().map(|h| h.chunk_id.as_str()).collect();
        assert_eq!(ids, vec!["c1", "c2", "c4"]);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(hits.iter().all(|h| h.route == Route::PathRoute));
        assert!(idx.route(&tok.tokenize("zzz"), 6).is_empty());
        assert_eq!(idx.route(&tok.tokenize("VNF"), 1).len(), 1);
    }

    #[test]
    fn source_filter() {
        let hits: Vec<ScoredHit> = ["a/1", "b/1", "a/2"]
            .iter()
            .enumerate()
            .map(|(i, id)| ScoredHit {
                chunk_id: id.to_string(),
                score: 3.0 - i as f64,
                rank: i + 1,
                route: Route::ChunkRoute,
            })
            .collect();
        let lookup = |id: &str| -> Option<&'static str> {
            match id {
                "a/1" => Some("a/1.html"),
                "b/1" => Some("b/1.html"),
                "a/2" => Some("a/2.html"),
                _ => None,
            }
        };
        assert_eq!(filter_by_source(hits.clone(), &SourceFilter::All, lookup), hits);
        assert!(filter_by_source(hits.clone(), &SourceFilter::Prefixes(vec![]), lookup).is_empty());
        let kept = filter_by_source(hits, &SourceFilter::Prefixes(vec!["a/".into()]), lookup);
        assert_eq!(
            kept.iter().map(|h| (h.chunk_id.as_str(), h.rank)).collect::<Vec<_>>(),
            vec![("a/1", 1), ("a/2", 2)]
        );
    }
}
