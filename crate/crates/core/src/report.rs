//! Length and source-subset breakdowns of a selection against its pool.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::interchange::CorpusManifest;

/// Lower bucket edges; the last bucket is open-ended.
pub const DEFAULT_LENGTH_EDGES: [u64; 6] = [0, 128, 256, 512, 1024, 2048];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("sample {0:?} is not in the corpus manifest")]
    MissingEntry(String),
    #[error("invalid bucket edges: {0}")]
    Edges(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn pct(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthBucket {
    pub lower: u64,
    /// Exclusive; `None` for the open last bucket.
    pub upper: Option<u64>,
    pub selected_count: u64,
    pub selected_pct: f64,
    pub pool_count: u64,
    pub pool_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LengthSummary {
    pub count: u64,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

impl LengthSummary {
    fn of(mut lengths: Vec<u64>) -> Self {
        let n = lengths.len();
        if n == 0 {
            return LengthSummary {
                count: 0,
                mean: None,
                median: None,
            };
        }
        lengths.sort_unstable();
        let sum: u128 = lengths.iter().map(|&x| x as u128).sum();
        let median = if n % 2 == 1 {
            lengths[n / 2] as f64
        } else {
            (lengths[n / 2 - 1] as f64 + lengths[n / 2] as f64) / 2.0
        };
        LengthSummary {
            count: n as u64,
            mean: Some(sum as f64 / n as f64),
            median: Some(median),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthReport {
    pub buckets: Vec<LengthBucket>,
    pub selected: LengthSummary,
    pub pool: LengthSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

fn check_edges(edges: &[u64]) -> Result<(), ReportError> {
    match edges.first() {
        None => return Err(ReportError::Edges("no edges given".into())),
        Some(&e) if e != 0 => return Err(ReportError::Edges("first edge must be 0".into())),
        _ => {}
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ReportError::Edges(
            "edges must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn bucket_of(edges: &[u64], n: u64) -> usize {
    edges.partition_point(|&e| e <= n) - 1
}

fn selected_entries<'a, 'm>(
    selected: impl IntoIterator<Item = &'a str>,
    corpus: &'m CorpusManifest,
) -> Result<Vec<&'m crate::interchange::ManifestEntry>, ReportError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for id in selected {
        let e = corpus
            .get(id)
            .ok_or_else(|| ReportError::MissingEntry(id.to_string()))?;
        if seen.insert(id) {
            out.push(e);
        }
    }
    Ok(out)
}

/// Token-length histogram of the selection and of the whole pool. `edges`
/// are bucket lower bounds starting at 0.
pub fn length_report<'a>(
    selected: impl IntoIterator<Item = &'a str>,
    corpus: &CorpusManifest,
    edges: &[u64],
) -> Result<LengthReport, ReportError> {
    check_edges(edges)?;
    let chosen = selected_entries(selected, corpus)?;
    let mut sel_counts = vec![0u64; edges.len()];
    let mut pool_counts = vec![0u64; edges.len()];
    for e in &chosen {
        sel_counts[bucket_of(edges, e.n_tokens)] += 1;
    }
    for e in corpus.entries() {
        pool_counts[bucket_of(edges, e.n_tokens)] += 1;
    }
    let n_sel = chosen.len() as u64;
    let n_pool = corpus.len() as u64;
    let buckets = edges
        .iter()
        .enumerate()
        .map(|(i, &lower)| LengthBucket {
            lower,
            upper: edges.get(i + 1).copied(),
            selected_count: sel_counts[i],
            selected_pct: pct(sel_counts[i], n_sel),
            pool_count: pool_counts[i],
            pool_pct: pct(pool_counts[i], n_pool),
        })
        .collect();
    Ok(LengthReport {
        buckets,
        selected: LengthSummary::of(chosen.iter().map(|e| e.n_tokens).collect()),
        pool: LengthSummary::of(corpus.entries().iter().map(|e| e.n_tokens).collect()),
        config_hash: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetRow {
    pub source: String,
    pub selected_count: u64,
    pub selected_pct: f64,
    pub pool_count: u64,
    pub pool_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetReport {
    /// One row per source present in the pool, ordered by source tag.
    pub rows: Vec<SubsetRow>,
    pub selected_total: u64,
    pub pool_total: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Share of the selection drawn from each source tag, with the pool baseline.
pub fn subset_report<'a>(
    selected: impl IntoIterator<Item = &'a str>,
    corpus: &CorpusManifest,
) -> Result<SubsetReport, ReportError> {
    let chosen = selected_entries(selected, corpus)?;
    let mut counts: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for e in corpus.entries() {
        counts.entry(&e.source).or_default().1 += 1;
    }
    for e in &chosen {
        counts.entry(&e.source).or_default().0 += 1;
    }
    let n_sel = chosen.len() as u64;
    let n_pool = corpus.len() as u64;
    let rows = counts
        .into_iter()
        .map(|(source, (s, p))| SubsetRow {
            source: source.to_string(),
            selected_count: s,
            selected_pct: pct(s, n_sel),
            pool_count: p,
            pool_pct: pct(p, n_pool),
        })
        .collect();
    Ok(SubsetReport {
        rows,
        selected_total: n_sel,
        pool_total: n_pool,
        config_hash: None,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

impl LengthReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write_json(path.as_ref(), self)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "lower",
            "upper",
            "selected_count",
            "selected_pct",
            "pool_count",
            "pool_pct",
            "config_hash",
        ])?;
        let hash = self.config_hash.as_deref().unwrap_or("");
        for b in &self.buckets {
            w.write_record([
                b.lower.to_string(),
                b.upper.map(|u| u.to_string()).unwrap_or_default(),
                b.selected_count.to_string(),
                b.selected_pct.to_string(),
                b.pool_count.to_string(),
                b.pool_pct.to_string(),
                hash.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

impl SubsetReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        write_json(path.as_ref(), self)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), ReportError> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "source",
            "selected_count",
            "selected_pct",
            "pool_count",
            "pool_pct",
            "config_hash",
        ])?;
        let hash = self.config_hash.as_deref().unwrap_or("");
        for r in &self.rows {
            w.write_record([
                r.source.clone(),
                r.selected_count.to_string(),
                r.selected_pct.to_string(),
                r.pool_count.to_string(),
                r.pool_pct.to_string(),
                hash.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
