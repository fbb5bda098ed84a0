//! On-disk chunk store: newline-delimited JSON files in one directory.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Chunk, IngestError, IngestOutput, IngestWarning, SourceDocument};

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const WARNINGS_FILE: &str = "warnings.jsonl";

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), IngestError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IngestError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Chunks plus the documents they came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkStore {
    pub documents: Vec<SourceDocument>,
    pub chunks: Vec<Chunk>,
    pub warnings: Vec<IngestWarning>,
}

impl From<IngestOutput> for ChunkStore {
    fn from(o: IngestOutput) -> Self {
        Self {
            documents: o.documents,
            chunks: o.chunks,
            warnings: o.warnings,
        }
    }
}

impl ChunkStore {
    pub fn save(&self, dir: &Path) -> Result<(), IngestError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(DOCUMENTS_FILE), &self.documents)?;
        write_jsonl(&dir.join(CHUNKS_FILE), &self.chunks)?;
        write_jsonl(&dir.join(WARNINGS_FILE), &self.warnings)?;
        Ok(())
    }

    /// Load a store; documents and warnings are optional.
    pub fn load(dir: &Path) -> Result<Self, IngestError> {
        let optional = |name: &str| dir.join(name).exists();
        Ok(Self {
            chunks: read_jsonl(&dir.join(CHUNKS_FILE))?,
            documents: if optional(DOCUMENTS_FILE) {
                read_jsonl(&dir.join(DOCUMENTS_FILE))?
            } else {
                Vec::new()
            },
            warnings: if optional(WARNINGS_FILE) {
                read_jsonl(&dir.join(WARNINGS_FILE))?
            } else {
                Vec::new()
            },
        })
    }
}
