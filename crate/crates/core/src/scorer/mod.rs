//! Candidate scoring against a fingerprint dictionary.
//!
//! Each in-scope token is scored by the cosine between its last-layer hidden
//! state and its class fingerprint. Classes missing from the dictionary back
//! off to the nearest fingerprinted class in input-embedding space with the
//! score scaled by `lambda`, or are skipped. Token scores pool into
//! `w_mu·mean + w_m·max + eta·coverage`.

mod corpus;
mod pooling;
mod resolver;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fingerprint::{FingerprintDictionary, ScoringScope};
use crate::interchange::{CandidateRecord, FormatError, TokenClass};

pub use corpus::{
    read_scores, score_corpus, write_scores, CorpusOptions, CorpusSummary, ScoreEntry,
    ScoreFileError, ScoreOutcome, ScoredLine,
};
pub use pooling::{pool, pool_scores, Pooled, ScorePool};
pub use resolver::{resolve_oov, OovResolver};

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("no input embedding for class {0}")]
    EmbeddingGap(TokenClass),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("dimension mismatch: dictionary D={expected}, record D={found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid scoring config: {0}")]
    Config(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("sample {sample_id:?}: {reason}")]
    Record { sample_id: String, reason: String },
    #[error("could not start worker pool: {0}")]
    Workers(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    #[default]
    Backoff,
    Skip,
}

impl std::str::FromStr for OovPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "backoff" => Ok(OovPolicy::Backoff),
            "skip" => Ok(OovPolicy::Skip),
            other => Err(format!(
                "unknown OOV policy {other:?} (expected backoff or skip)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Penalty on backed-off token scores, in `(0, 1]`.
    pub lambda: f64,
    pub w_mu: f64,
    pub w_m: f64,
    /// Coverage bonus weight. Zero reproduces plain mean-max pooling.
    pub eta: f64,
    pub scope: ScoringScope,
    pub oov_policy: OovPolicy,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            lambda: 1.0,
            w_mu: 0.5,
            w_m: 0.5,
            eta: 0.05,
            scope: ScoringScope::All,
            oov_policy: OovPolicy::Backoff,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |m: String| Err(ScoreError::Config(m));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda must lie in (0, 1] (got {})", self.lambda));
        }
        if !(self.w_mu >= 0.0 && self.w_m >= 0.0) {
            return bad(format!(
                "pool weights must be non-negative (w_mu={}, w_m={})",
                self.w_mu, self.w_m
            ));
        }
        if (self.w_mu + self.w_m - 1.0).abs() > 1e-9 {
            return bad(format!(
                "w_mu + w_m must equal 1 (got {})",
                self.w_mu + self.w_m
            ));
        }
        if !(0.0..=0.5).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 0.5] (got {})", self.eta));
        }
        Ok(())
    }
}

/// Result of scoring a single token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokenScore {
    Matched(f64),
    /// Scored through the nearest fingerprinted class, penalty applied.
    Backoff {
        score: f64,
        via: TokenClass,
    },
    /// Unfingerprinted class under the skip policy.
    Skipped,
}

impl TokenScore {
    pub fn value(self) -> Option<f64> {
        match self {
            TokenScore::Matched(s) | TokenScore::Backoff { score: s, .. } => Some(s),
            TokenScore::Skipped => None,
        }
    }
}

/// Per-candidate outcome. `score` is `-inf` when no token was scored.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub score: f64,
    pub mu: Option<f64>,
    pub max: Option<f64>,
    pub kappa: Option<f64>,
    pub scored_tokens: u64,
    pub total_tokens: u64,
    pub oov_tokens: u64,
    pub zero_norm_tokens: u64,
    pub source: String,
}

impl ScoreRecord {
    pub fn is_empty_scope(&self) -> bool {
        self.scored_tokens == 0
    }
}

struct Prepared {
    vector: Vec<f32>,
    norm: f64,
}

/// Dictionary, resolver and config bound together for scoring. Shareable
/// across threads.
pub struct Scorer<'a> {
    dict: &'a FingerprintDictionary,
    resolver: &'a OovResolver,
    cfg: ScoringConfig,
    prepared: std::collections::HashMap<TokenClass, Prepared>,
}

#[inline]
fn dot_norm(h: &[f32], f: &[f32]) -> (f64, f64) {
    let mut dot = 0.0f64;
    let mut hh = 0.0f64;
    for (&x, &y) in h.iter().zip(f) {
        let x = x as f64;
        dot += x * y as f64;
        hh += x * x;
    }
    (dot, hh)
}

impl<'a> Scorer<'a> {
    /// Fails with `ConfigMismatch` if the dictionary was built under another scope.
    pub fn new(
        dict: &'a FingerprintDictionary,
        resolver: &'a OovResolver,
        cfg: ScoringConfig,
    ) -> Result<Self, ScoreError> {
        cfg.validate()?;
        if dict.meta.scope != cfg.scope {
            return Err(ScoreError::ConfigMismatch(format!(
                "dictionary scope is {}, scoring scope is {}",
                dict.meta.scope, cfg.scope
            )));
        }
        let prepared = dict
            .entries
            .iter()
            .map(|(c, e)| {
                let norm = e.norm();
                (
                    *c,
                    Prepared {
                        vector: e.vector.clone(),
                        norm,
                    },
                )
            })
            .collect();
        Ok(Scorer {
            dict,
            resolver,
            cfg,
            prepared,
        })
    }

    pub fn config(&self) -> &ScoringConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dict.meta.dim
    }

    fn cosine(&self, hidden: &[f32], class: TokenClass) -> f64 {
        let p = &self.prepared[&class];
        let (dot, hh) = dot_norm(hidden, &p.vector);
        (dot / (hh.sqrt() * p.norm)).clamp(-1.0, 1.0)
    }

    /// Scores one token. `hidden` must have nonzero norm.
    pub fn token_score(&self, hidden: &[f32], class: TokenClass) -> Result<TokenScore, ScoreError> {
        if self.prepared.contains_key(&class) {
            return Ok(TokenScore::Matched(self.cosine(hidden, class)));
        }
        match self.cfg.oov_policy {
            OovPolicy::Skip => Ok(TokenScore::Skipped),
            OovPolicy::Backoff => {
                let via = self.resolver.resolve(class)?;
                Ok(TokenScore::Backoff {
                    score: self.cfg.lambda * self.cosine(hidden, via),
                    via,
                })
            }
        }
    }

    /// Scores one candidate over its scored-token set: in-scope, non-special,
    /// nonzero-norm positions, minus skipped unfingerprinted classes.
    pub fn score_candidate(&self, record: &CandidateRecord) -> Result<ScoreRecord, ScoreError> {
        if record.dim != self.dim() {
            return Err(ScoreError::DimensionMismatch {
                expected: self.dim(),
                found: record.dim,
            });
        }
        let mut pool = ScorePool::new();
        let mut oov = 0u64;
        let mut zero_norm = 0u64;
        for (i, (&class, &role)) in record.token_ids.iter().zip(&record.roles).enumerate() {
            if !self.cfg.scope.admits(role) {
                continue;
            }
            let hidden = record.hidden_row(i);
            if hidden.iter().all(|&x| x == 0.0) {
                zero_norm += 1;
                continue;
            }
            let s = self.token_score(hidden, class)?;
            if !matches!(s, TokenScore::Matched(_)) {
                oov += 1;
            }
            if let Some(v) = s.value() {
                pool.push(v);
            }
        }
        let total = record.len() as u64;
        let pooled = pooling::pool(&pool, total, self.cfg.w_mu, self.cfg.w_m, self.cfg.eta);
        Ok(ScoreRecord {
            sample_id: record.sample_id.clone(),
            score: pooled.score,
            mu: pooled.mu,
            max: pooled.max,
            kappa: pooled.kappa,
            scored_tokens: pool.count(),
            total_tokens: total,
            oov_tokens: oov,
            zero_norm_tokens: zero_norm,
            source: String::new(),
        })
    }
}
