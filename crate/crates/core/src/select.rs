//! Budgeted top-K selection over score streams.
//!
//! Ranking is by score descending, then sample id ascending. Selection keeps a
//! bounded heap of the K best entries seen so far, so memory is O(K) whatever
//! the stream length, and heaps built over shards merge into the same result.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Coreset size, either absolute or as a share of the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    TopK(usize),
    TopP(f64),
}

impl Budget {
    pub fn validate(&self) -> Result<(), SelectError> {
        match *self {
            Budget::TopK(0) => Err(SelectError::Budget("top-k must be at least 1".into())),
            Budget::TopP(p) if !(p > 0.0 && p <= 1.0) => Err(SelectError::Budget(format!(
                "top-p must lie in (0, 1] (got {p})"
            ))),
            _ => Ok(()),
        }
    }

    /// Number of samples to select from a corpus of `n`. Fractions round up;
    /// products within 1e-9 of an integer count as that integer.
    pub fn resolve(&self, n: usize) -> usize {
        match *self {
            Budget::TopK(k) => k,
            Budget::TopP(p) => {
                let x = p * n as f64;
                let r = x.round();
                if (x - r).abs() <= 1e-9 {
                    r as usize
                } else {
                    x.ceil() as usize
                }
            }
        }
    }
}

/// One rankable entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sample_id: String,
    pub score: f64,
    pub source: String,
}

// Ordered by rank position: Less means ranked earlier.
#[derive(Debug, Clone)]
struct Ranked(Candidate);

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .score
            .total_cmp(&self.0.score)
            .then_with(|| self.0.sample_id.cmp(&other.0.sample_id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

/// Rank order used everywhere: score descending, then sample id ascending.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    Ranked(a.clone()).cmp(&Ranked(b.clone()))
}

/// Bounded selection structure holding the `k` best candidates pushed so far.
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    // Max-heap by rank position: the top is the worst kept entry.
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        TopK {
            k,
            heap: BinaryHeap::with_capacity(k.min(1 << 20) + 1),
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, c: Candidate) {
        if self.k == 0 {
            return;
        }
        let r = Ranked(c);
        if self.heap.len() < self.k {
            self.heap.push(r);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if r < *worst {
                *worst = r;
            }
        }
    }

    /// Folds another structure in. Associative and order-insensitive.
    pub fn merge(&mut self, other: TopK) {
        for r in other.heap {
            self.push(r.0);
        }
    }

    /// Kept candidates, best first.
    pub fn into_sorted(self) -> Vec<Candidate> {
        self.heap
            .into_sorted_vec()
            .into_iter()
            .map(|r| r.0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub rank: usize,
    pub sample_id: String,
    #[serde(rename = "S")]
    pub score: f64,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionManifest {
    pub selected: Vec<Selected>,
    /// Entries that can never be selected: empty scoring scope or a failed score.
    pub excluded: Vec<Exclusion>,
    pub corpus_size: usize,
    pub requested: usize,
    pub budget: Budget,
}

impl SelectionManifest {
    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.selected.iter().map(|s| s.sample_id.as_str())
    }
}

/// Exact top-K under (score desc, id asc). Non-finite scores, which include
/// the empty-scope sentinel, are never selected and are listed as exclusions.
pub fn select_top(
    scores: impl IntoIterator<Item = Candidate>,
    budget: Budget,
    corpus_size: usize,
) -> SelectionManifest {
    let requested = budget.resolve(corpus_size);
    let mut top = TopK::new(requested);
    let mut excluded = Vec::new();
    let mut seen = 0usize;
    for c in scores {
        seen += 1;
        if c.score.is_finite() {
            top.push(c);
        } else {
            excluded.push(Exclusion {
                sample_id: c.sample_id,
                reason: "empty_scope".into(),
            });
        }
    }
    if requested > seen {
        log::warn!("budget of {requested} exceeds the {seen} scored candidates; selecting all");
    }
    excluded.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let selected = top
        .into_sorted()
        .into_iter()
        .enumerate()
        .map(|(i, c)| Selected {
            rank: i + 1,
            sample_id: c.sample_id,
            score: c.score,
            source: c.source,
            config_hash: None,
        })
        .collect();
    SelectionManifest {
        selected,
        excluded,
        corpus_size,
        requested,
        budget,
    }
}

/// Writes the ranked selection as JSON lines `{rank, sample_id, S, source}`.
pub fn write_selection(
    path: impl AsRef<Path>,
    manifest: &SelectionManifest,
    config_hash: Option<&str>,
) -> Result<(), SelectError> {
    let mut out = BufWriter::new(File::create(path)?);
    for s in &manifest.selected {
        let line = Selected {
            config_hash: config_hash.map(str::to_string),
            ..s.clone()
        };
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_selection(path: impl AsRef<Path>) -> Result<Vec<Selected>, SelectError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| SelectError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}
