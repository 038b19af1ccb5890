use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One row of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub source: String,
    pub n_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_len: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest line {line}: duplicate sample_id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("sample {0:?} has no manifest entry")]
    Missing(String),
}

/// Corpus metadata keyed by sample id, in file order.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    entries: Vec<ManifestEntry>,
    index: HashMap<String, usize>,
}

impl CorpusManifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Result<Self, ManifestError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.sample_id.clone(), i).is_some() {
                return Err(ManifestError::DuplicateId {
                    line: i + 1,
                    id: e.sample_id.clone(),
                });
            }
        }
        Ok(CorpusManifest { entries, index })
    }

    pub fn get(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.index.get(sample_id).map(|&i| &self.entries[i])
    }

    pub fn require(&self, sample_id: &str) -> Result<&ManifestEntry, ManifestError> {
        self.get(sample_id)
            .ok_or_else(|| ManifestError::Missing(sample_id.to_string()))
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest, ManifestError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line).map_err(|source| ManifestError::Parse {
            line: i + 1,
            source,
        })?;
        entries.push(entry);
    }
    CorpusManifest::from_entries(entries)
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    manifest: &CorpusManifest,
) -> Result<(), ManifestError> {
    let mut out = BufWriter::new(File::create(path)?);
    for e in manifest.entries() {
        serde_json::to_writer(&mut out, e).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
