//! Retrieval-augmented question answering over HTML documentation packages.
//!
//! Ingestion turns a package into chunks, sparse and dense routes retrieve
//! candidates, a layer-wise reranker orders them, and a chat model answers
//! from the selected context.

pub mod backend;
pub mod bench;
pub mod compress;
pub mod dense;
pub mod error;
pub mod fusion;
pub mod hit;
pub mod ingest;
pub mod pipeline;
pub mod qa;
pub mod rerank;
pub mod sparse;
pub mod tokenize;
