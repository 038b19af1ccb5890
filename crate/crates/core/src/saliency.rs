//! Attention-derived token saliency for validation samples.
//!
//! Each position gets two signals from the post-softmax attention of the final
//! layers. Row saliency is one minus the normalized entropy of the
//! position's outgoing (query) distribution, so a token that attends sharply
//! scores near 1. Column saliency is the average attention the position
//! receives as a key, min-max scaled over the sample. The aggregated saliency
//! is their convex combination.
//!
//! Per-(layer, head) values are computed first and averaged afterwards;
//! entropy is nonlinear, so averaging attention first would change the result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interchange::ValidationRecord;

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_LAYERS: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum SaliencyError {
    #[error("attention row has no valid keys")]
    EmptyRow,
    #[error("valid_keys={valid_keys} exceeds row length {len}")]
    RowTooShort { valid_keys: usize, len: usize },
    #[error("record {0:?} carries no attention layers or heads")]
    NoAttention(String),
    #[error("invalid saliency config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaliencyConfig {
    /// Number of final layers to aggregate; capped at what the record carries.
    pub layers: usize,
    pub w_q: f64,
    pub w_k: f64,
    pub epsilon: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            layers: DEFAULT_LAYERS,
            w_q: 0.5,
            w_k: 0.5,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SaliencyConfig {
    pub fn validate(&self) -> Result<(), SaliencyError> {
        let bad = |m: String| Err(SaliencyError::Config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if !(self.w_q >= 0.0 && self.w_k >= 0.0) {
            return bad(format!(
                "weights must be non-negative (w_q={}, w_k={})",
                self.w_q, self.w_k
            ));
        }
        if (self.w_q + self.w_k - 1.0).abs() > 1e-9 {
            return bad(format!(
                "w_q + w_k must equal 1 (got {})",
                self.w_q + self.w_k
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive (got {})", self.epsilon));
        }
        Ok(())
    }

    /// Layers actually aggregated for a record carrying `available` layers.
    pub fn effective_layers(&self, available: usize) -> usize {
        self.layers.min(available)
    }
}

/// Per-position saliency of one validation sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyMap {
    /// Row saliency `Q`.
    pub q: Vec<f64>,
    /// Min-max normalized column saliency `K`.
    pub k: Vec<f64>,
    /// `w_q·Q + w_k·K`.
    pub alpha: Vec<f64>,
}

impl SaliencyMap {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }
}

fn check_row<A>(row: &[A], valid_keys: usize) -> Result<(), SaliencyError> {
    if valid_keys == 0 {
        return Err(SaliencyError::EmptyRow);
    }
    if valid_keys > row.len() {
        return Err(SaliencyError::RowTooShort {
            valid_keys,
            len: row.len(),
        });
    }
    Ok(())
}

/// Shannon entropy `-Σ a·ln(a + ε)` over the first `valid_keys` entries.
pub fn row_entropy<A: Copy + Into<f64>>(
    row: &[A],
    valid_keys: usize,
    epsilon: f64,
) -> Result<f64, SaliencyError> {
    check_row(row, valid_keys)?;
    Ok(entropy(&row[..valid_keys], epsilon))
}

#[inline]
fn entropy<A: Copy + Into<f64>>(row: &[A], epsilon: f64) -> f64 {
    row.iter()
        .map(|&a| {
            let a: f64 = a.into();
            -a * (a + epsilon).ln()
        })
        .sum()
}

/// `1 − H / ln n` where `n` counts strictly positive entries, clamped to
/// `[0, 1]`. A row with a single positive entry is maximally sharp and scores 1.
pub fn row_saliency<A: Copy + Into<f64>>(
    row: &[A],
    valid_keys: usize,
    epsilon: f64,
) -> Result<f64, SaliencyError> {
    check_row(row, valid_keys)?;
    let row = &row[..valid_keys];
    let support = row.iter().filter(|&&a| a.into() > 0.0).count();
    match support {
        0 => Err(SaliencyError::EmptyRow),
        1 => Ok(1.0),
        n => {
            let q = 1.0 - entropy(row, epsilon) / (n as f64).ln();
            Ok(q.clamp(0.0, 1.0))
        }
    }
}

fn layer_range(
    record: &ValidationRecord,
    cfg: &SaliencyConfig,
) -> Result<std::ops::Range<usize>, SaliencyError> {
    if record.layers == 0 || record.heads == 0 {
        return Err(SaliencyError::NoAttention(record.sample_id.clone()));
    }
    if cfg.layers == 0 {
        return Err(SaliencyError::Config("layers must be at least 1".into()));
    }
    let used = cfg.effective_layers(record.layers);
    Ok(record.layers - used..record.layers)
}

// Mean over the (layer, head) axis of a [T × LH] buffer. Values are summed in
// sorted order so that any permutation of heads or layers gives the same bits.
fn sorted_means(mut values: Vec<f64>, t: usize, per_pos: usize) -> Vec<f64> {
    (0..t)
        .map(|i| {
            let slot = &mut values[i * per_pos..(i + 1) * per_pos];
            slot.sort_unstable_by(f64::total_cmp);
            slot.iter().sum::<f64>() / per_pos as f64
        })
        .collect()
}

/// Row saliency `Q_i`, averaged over the final layers and all heads.
pub fn aggregate_row_saliency(
    record: &ValidationRecord,
    cfg: &SaliencyConfig,
) -> Result<Vec<f64>, SaliencyError> {
    let layers = layer_range(record, cfg)?;
    let t = record.len();
    let per_pos = layers.len() * record.heads;
    let mut values = vec![0.0; t * per_pos];
    let mut slot = 0;
    for layer in layers {
        for head in 0..record.heads {
            for i in 0..t {
                let row = record.attention_row(layer, head, i);
                // Under a causal mask query i sees keys 0..=i; anything beyond
                // is zero and does not change entropy or support.
                values[i * per_pos + slot] = row_saliency(row, t, cfg.epsilon)?;
            }
            slot += 1;
        }
    }
    Ok(sorted_means(values, t, per_pos))
}

/// Raw column saliency `K_raw` plus a flag per position telling whether any
/// query attends to it at all.
pub fn raw_column_saliency(
    record: &ValidationRecord,
    cfg: &SaliencyConfig,
) -> Result<(Vec<f64>, Vec<bool>), SaliencyError> {
    let layers = layer_range(record, cfg)?;
    let t = record.len();
    let per_pos = layers.len() * record.heads;
    let mut values = vec![0.0; t * per_pos];
    let mut received = vec![false; t];
    let mut sums = vec![0.0f64; t];
    let mut counts = vec![0usize; t];
    let mut slot = 0;
    for layer in layers {
        for head in 0..record.heads {
            sums.iter_mut().for_each(|s| *s = 0.0);
            counts.iter_mut().for_each(|c| *c = 0);
            let a = record.attention_matrix(layer, head);
            for i in 0..t {
                for (j, &v) in a[i * t..(i + 1) * t].iter().enumerate() {
                    if v > 0.0 {
                        sums[j] += v as f64;
                        counts[j] += 1;
                    }
                }
            }
            for j in 0..t {
                values[j * per_pos + slot] = if counts[j] > 0 {
                    received[j] = true;
                    sums[j] / counts[j] as f64
                } else {
                    0.0
                };
            }
            slot += 1;
        }
    }
    Ok((sorted_means(values, t, per_pos), received))
}

/// Min-max scaling over the positions flagged in `support`. Positions outside
/// the support map to 0.
pub fn min_max_normalize(raw: &[f64], support: &[bool], epsilon: f64) -> Vec<f64> {
    let live = raw.iter().zip(support).filter(|(_, &s)| s).map(|(&v, _)| v);
    let (lo, hi) = live.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if lo > hi {
        return vec![0.0; raw.len()];
    }
    let span = hi - lo + epsilon;
    raw.iter()
        .zip(support)
        .map(|(&v, &s)| {
            if s {
                ((v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect()
}

/// Column saliency `K_j`, min-max scaled within the sample.
pub fn column_saliency(
    record: &ValidationRecord,
    cfg: &SaliencyConfig,
) -> Result<Vec<f64>, SaliencyError> {
    let (raw, support) = raw_column_saliency(record, cfg)?;
    Ok(min_max_normalize(&raw, &support, cfg.epsilon))
}

/// Row, column and aggregated saliency for every position, SPECIAL ones
/// included. Exclusion happens when fingerprints are collected.
pub fn aggregated_saliency(
    record: &ValidationRecord,
    cfg: &SaliencyConfig,
) -> Result<SaliencyMap, SaliencyError> {
    let q = aggregate_row_saliency(record, cfg)?;
    let k = column_saliency(record, cfg)?;
    let alpha = q
        .iter()
        .zip(&k)
        .map(|(&q, &k)| (cfg.w_q * q + cfg.w_k * k).clamp(0.0, 1.0))
        .collect();
    Ok(SaliencyMap { q, k, alpha })
}
