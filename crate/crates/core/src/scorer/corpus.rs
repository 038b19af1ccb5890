use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ScoreError, ScoreRecord, Scorer};
use crate::interchange::{CandidateRecord, CorpusManifest, FormatError};

#[derive(Debug, Clone, Copy)]
pub struct CorpusOptions {
    pub workers: usize,
    /// Abort on the first per-record error instead of emitting an error entry.
    pub strict: bool,
    /// Records held in memory per parallel step.
    pub batch_size: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            workers: 1,
            strict: false,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreOutcome {
    Scored(ScoreRecord),
    Failed { sample_id: String, error: String },
}

impl ScoreOutcome {
    pub fn sample_id(&self) -> &str {
        match self {
            ScoreOutcome::Scored(r) => &r.sample_id,
            ScoreOutcome::Failed { sample_id, .. } => sample_id,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub records: u64,
    pub empty_scope: u64,
    pub failed: u64,
    pub total_tokens: u64,
    pub scored_tokens: u64,
    pub oov_tokens: u64,
    pub zero_norm_tokens: u64,
}

impl CorpusSummary {
    /// Share of scored tokens that went through backoff.
    pub fn oov_rate(&self) -> f64 {
        if self.scored_tokens == 0 {
            0.0
        } else {
            self.oov_tokens as f64 / self.scored_tokens as f64
        }
    }

    fn add(&mut self, o: &ScoreOutcome) {
        self.records += 1;
        match o {
            ScoreOutcome::Scored(r) => {
                self.empty_scope += r.is_empty_scope() as u64;
                self.total_tokens += r.total_tokens;
                self.scored_tokens += r.scored_tokens;
                self.oov_tokens += r.oov_tokens;
                self.zero_norm_tokens += r.zero_norm_tokens;
            }
            ScoreOutcome::Failed { .. } => self.failed += 1,
        }
    }
}

/// Scores a candidate stream in one pass and returns the outcomes ordered by
/// sample id.
///
/// Candidates are read in batches of `batch_size` and each batch is scored on
/// `workers` threads, so resident candidate data stays bounded whatever the
/// corpus size. Every record is scored independently; the output is identical
/// for any worker count or sharding of the input. A sample id seen more than
/// once keeps its first occurrence; later ones become error entries.
pub fn score_corpus<I>(
    candidates: I,
    scorer: &Scorer<'_>,
    sources: Option<&CorpusManifest>,
    opts: &CorpusOptions,
) -> Result<(Vec<ScoreOutcome>, CorpusSummary), ScoreError>
where
    I: IntoIterator<Item = Result<CandidateRecord, FormatError>>,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| ScoreError::Workers(e.to_string()))?;
    let batch_size = opts.batch_size.max(1);

    let score_one = |rec: &CandidateRecord| -> ScoreOutcome {
        match scorer.score_candidate(rec) {
            Ok(mut r) => {
                if let Some(e) = sources.and_then(|m| m.get(&r.sample_id)) {
                    r.source = e.source.clone();
                }
                ScoreOutcome::Scored(r)
            }
            Err(e) => ScoreOutcome::Failed {
                sample_id: rec.sample_id.clone(),
                error: e.to_string(),
            },
        }
    };

    let mut outcomes: Vec<ScoreOutcome> = Vec::new();
    let mut batch: Vec<CandidateRecord> = Vec::with_capacity(batch_size);
    let mut iter = candidates.into_iter();
    loop {
        batch.clear();
        for item in iter.by_ref().take(batch_size) {
            batch.push(item?);
        }
        if batch.is_empty() {
            break;
        }
        let scored: Vec<ScoreOutcome> = if opts.workers <= 1 {
            batch.iter().map(score_one).collect()
        } else {
            pool.install(|| batch.par_iter().map(score_one).collect())
        };
        if opts.strict {
            if let Some(ScoreOutcome::Failed { sample_id, error }) = scored
                .iter()
                .find(|o| matches!(o, ScoreOutcome::Failed { .. }))
            {
                return Err(ScoreError::Record {
                    sample_id: sample_id.clone(),
                    reason: error.clone(),
                });
            }
        }
        outcomes.extend(scored);
    }

    // Stable: among repeated ids the first in input order stays first.
    outcomes.sort_by(|a, b| a.sample_id().cmp(b.sample_id()));
    for i in 1..outcomes.len() {
        if outcomes[i].sample_id() == outcomes[i - 1].sample_id() {
            let sample_id = outcomes[i].sample_id().to_string();
            if opts.strict {
                return Err(ScoreError::Record {
                    sample_id,
                    reason: "duplicate sample_id".into(),
                });
            }
            outcomes[i] = ScoreOutcome::Failed {
                sample_id,
                error: "duplicate sample_id".into(),
            };
        }
    }

    let mut summary = CorpusSummary::default();
    for o in &outcomes {
        summary.add(o);
    }
    Ok((outcomes, summary))
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLine {
    pub sample_id: String,
    #[serde(rename = "S")]
    pub score: Option<f64>,
    pub mu: Option<f64>,
    pub m: Option<f64>,
    pub kappa: Option<f64>,
    pub scored_tokens: u64,
    pub total_tokens: u64,
    pub oov_tokens: u64,
    pub source: String,
    pub empty_scope: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreEntry {
    Error {
        sample_id: String,
        error: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        config_hash: Option<String>,
    },
    Scored(ScoredLine),
}

impl ScoreEntry {
    pub fn sample_id(&self) -> &str {
        match self {
            ScoreEntry::Error { sample_id, .. } => sample_id,
            ScoreEntry::Scored(l) => &l.sample_id,
        }
    }

    pub fn config_hash(&self) -> Option<&str> {
        match self {
            ScoreEntry::Error { config_hash, .. } => config_hash.as_deref(),
            ScoreEntry::Scored(l) => l.config_hash.as_deref(),
        }
    }

    fn from_outcome(o: &ScoreOutcome, config_hash: Option<&str>) -> Self {
        let config_hash = config_hash.map(str::to_string);
        match o {
            ScoreOutcome::Failed { sample_id, error } => ScoreEntry::Error {
                sample_id: sample_id.clone(),
                error: error.clone(),
                config_hash,
            },
            ScoreOutcome::Scored(r) => ScoreEntry::Scored(ScoredLine {
                sample_id: r.sample_id.clone(),
                score: (!r.is_empty_scope()).then_some(r.score),
                mu: r.mu,
                m: r.max,
                kappa: r.kappa,
                scored_tokens: r.scored_tokens,
                total_tokens: r.total_tokens,
                oov_tokens: r.oov_tokens,
                source: r.source.clone(),
                empty_scope: r.is_empty_scope(),
                config_hash,
            }),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScoreFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// Writes outcomes as JSON lines, in the order given.
pub fn write_scores(
    path: impl AsRef<Path>,
    outcomes: &[ScoreOutcome],
    config_hash: Option<&str>,
) -> Result<(), ScoreFileError> {
    let path = path.as_ref();
    let tmp = crate::interchange::sibling_temp(path)?;
    let mut out = BufWriter::new(tmp);
    for o in outcomes {
        serde_json::to_writer(&mut out, &ScoreEntry::from_outcome(o, config_hash))
            .map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    let tmp = out.into_inner().map_err(|e| e.into_error())?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Streams the entries of a score file.
pub fn read_scores(
    path: impl AsRef<Path>,
) -> Result<impl Iterator<Item = Result<ScoreEntry, ScoreFileError>>, ScoreFileError> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
        .map(|(i, line)| {
            let line = line?;
            serde_json::from_str(&line).map_err(|source| ScoreFileError::Parse {
                line: i + 1,
                source,
            })
        }))
}
