//! Saliency-weighted token fingerprints.
//!
//! Every in-scope, non-special occurrence of a token class in the validation
//! set contributes its unit-normalized last-layer hidden state, weighted by the
//! position's aggregated saliency. The class fingerprint is the normalized
//! weighted sum.

mod file;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interchange::{FormatError, Role, TokenClass, ValidationRecord};
use crate::saliency::{aggregated_saliency, SaliencyConfig, SaliencyError, SaliencyMap};

pub use file::{
    load_fingerprints, read_fingerprints_unchecked, save_fingerprints, LoadExpectations,
};

pub const BUILDER_VERSION: &str = concat!("trim-core/", env!("CARGO_PKG_VERSION"));

/// Allowed deviation of a stored fingerprint's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Sums with a norm below this are treated as cancelled out.
pub const DEGENERATE_NORM: f64 = 1e-10;

/// Which part of a sample is fingerprinted and scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoringScope {
    #[default]
    All,
    #[serde(rename = "prompt")]
    PromptOnly,
    #[serde(rename = "response")]
    ResponseOnly,
}

impl ScoringScope {
    /// SPECIAL positions are never admitted.
    #[inline]
    pub fn admits(self, role: Role) -> bool {
        match (self, role) {
            (_, Role::Special) => false,
            (ScoringScope::All, _) => true,
            (ScoringScope::PromptOnly, r) => r == Role::Prompt,
            (ScoringScope::ResponseOnly, r) => r == Role::Response,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ScoringScope::All => 0,
            ScoringScope::PromptOnly => 1,
            ScoringScope::ResponseOnly => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ScoringScope::All),
            1 => Some(ScoringScope::PromptOnly),
            2 => Some(ScoringScope::ResponseOnly),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoringScope::All => "all",
            ScoringScope::PromptOnly => "prompt",
            ScoringScope::ResponseOnly => "response",
        }
    }
}

impl std::fmt::Display for ScoringScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScoringScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "all" => Ok(ScoringScope::All),
            "prompt" => Ok(ScoringScope::PromptOnly),
            "response" => Ok(ScoringScope::ResponseOnly),
            other => Err(format!(
                "unknown scope {other:?} (expected all, prompt or response)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error("no fingerprints: no in-scope token with a usable hidden state")]
    NoFingerprints,
    #[error("sample {sample_id:?}: {reason}")]
    LengthMismatch { sample_id: String, reason: String },
    #[error("duplicate validation sample id {0:?}")]
    DuplicateSample(String),
    #[error("dimension mismatch: expected D={expected}, found D={found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("scope mismatch: expected {expected}, file was built with {found}")]
    ScopeMismatch {
        expected: ScoringScope,
        found: ScoringScope,
    },
    #[error("class {class} fingerprint has norm {norm}, not 1")]
    NormViolation { class: TokenClass, norm: f64 },
    #[error("invalid fingerprint metadata: {0}")]
    Meta(String),
}

/// Build provenance stored alongside the vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerprintMeta {
    pub dim: usize,
    pub layers_used: usize,
    pub w_q: f64,
    pub w_k: f64,
    pub scope: ScoringScope,
    pub builder_version: String,
    pub validation_sample_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl FingerprintMeta {
    pub fn new(dim: usize, saliency: &SaliencyConfig, scope: ScoringScope) -> Self {
        FingerprintMeta {
            dim,
            layers_used: saliency.layers,
            w_q: saliency.w_q,
            w_k: saliency.w_k,
            scope,
            builder_version: BUILDER_VERSION.to_string(),
            validation_sample_ids: Vec::new(),
            config_hash: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintEntry {
    /// Unit-norm fingerprint.
    pub vector: Vec<f32>,
    pub occurrence_count: u32,
    /// Total weight that produced `vector`.
    pub weight_sum: f32,
}

impl FingerprintEntry {
    pub fn norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&x| x as f64 * x as f64)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FingerprintDictionary {
    pub meta: FingerprintMeta,
    pub entries: BTreeMap<TokenClass, FingerprintEntry>,
}

impl FingerprintDictionary {
    pub fn get(&self, class: TokenClass) -> Option<&FingerprintEntry> {
        self.entries.get(&class)
    }

    pub fn contains(&self, class: TokenClass) -> bool {
        self.entries.contains_key(&class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> impl Iterator<Item = TokenClass> + '_ {
        self.entries.keys().copied()
    }
}

/// One in-scope position of a validation sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occurrence<'a> {
    pub sample_id: &'a str,
    pub position: usize,
    pub alpha: f64,
    pub hidden: &'a [f32],
}

/// Occurrences grouped by class, each list sorted by (sample_id, position).
#[derive(Debug, Clone, Default)]
pub struct Occurrences<'a> {
    pub classes: BTreeMap<TokenClass, Vec<Occurrence<'a>>>,
    /// In-scope positions skipped because their hidden state has zero norm.
    pub zero_norm_dropped: usize,
    pub sample_ids: Vec<String>,
}

impl Occurrences<'_> {
    pub fn total(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }
}

fn squared_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum()
}

/// Groups every in-scope, non-special position by token class.
pub fn collect_occurrences<'a>(
    records: impl IntoIterator<Item = (&'a ValidationRecord, &'a SaliencyMap)>,
    scope: ScoringScope,
) -> Result<Occurrences<'a>, FingerprintError> {
    let mut out = Occurrences::default();
    let mut seen = std::collections::HashSet::new();
    for (record, map) in records {
        let t = record.len();
        if map.len() != t || record.roles.len() != t || record.hidden.len() != t * record.dim {
            return Err(FingerprintError::LengthMismatch {
                sample_id: record.sample_id.clone(),
                reason: format!(
                    "{t} tokens, {} roles, {} saliency values, {} hidden values (D={})",
                    record.roles.len(),
                    map.len(),
                    record.hidden.len(),
                    record.dim
                ),
            });
        }
        if !seen.insert(record.sample_id.as_str()) {
            return Err(FingerprintError::DuplicateSample(record.sample_id.clone()));
        }
        out.sample_ids.push(record.sample_id.clone());
        for i in 0..t {
            if !scope.admits(record.roles[i]) {
                continue;
            }
            let hidden = record.hidden_row(i);
            if squared_norm(hidden) == 0.0 {
                out.zero_norm_dropped += 1;
                continue;
            }
            out.classes
                .entry(record.token_ids[i])
                .or_default()
                .push(Occurrence {
                    sample_id: &record.sample_id,
                    position: i,
                    alpha: map.alpha[i],
                    hidden,
                });
        }
    }
    for list in out.classes.values_mut() {
        list.sort_by(|a, b| (a.sample_id, a.position).cmp(&(b.sample_id, b.position)));
    }
    out.sample_ids.sort();
    if out.zero_norm_dropped > 0 {
        log::warn!(
            "{} in-scope positions dropped for zero-norm hidden states",
            out.zero_norm_dropped
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub dictionary: FingerprintDictionary,
    /// Classes whose weighted sum cancelled and fell back to the unweighted mean.
    pub fallbacks: Vec<TokenClass>,
    /// Classes dropped because the unweighted mean cancelled as well.
    pub dropped: Vec<TokenClass>,
}

enum ClassResult {
    Weighted(FingerprintEntry),
    Fallback(FingerprintEntry),
    Dropped,
}

fn accumulate(occ: &[Occurrence<'_>], dim: usize, weighted: bool) -> (Vec<f64>, f64) {
    let mut sum = vec![0.0f64; dim];
    let mut weight = 0.0f64;
    for o in occ {
        let inv = 1.0 / squared_norm(o.hidden).sqrt();
        let w = if weighted { o.alpha } else { 1.0 };
        weight += w;
        for (s, &h) in sum.iter_mut().zip(o.hidden) {
            *s += w * (h as f64 * inv);
        }
    }
    (sum, weight)
}

fn normalized(sum: &[f64]) -> Option<Vec<f32>> {
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm >= DEGENERATE_NORM).then(|| sum.iter().map(|&x| (x / norm) as f32).collect())
}

fn build_class(occ: &[Occurrence<'_>], dim: usize) -> ClassResult {
    let count = occ.len() as u32;
    let (sum, weight) = accumulate(occ, dim, true);
    if let Some(vector) = normalized(&sum) {
        return ClassResult::Weighted(FingerprintEntry {
            vector,
            occurrence_count: count,
            weight_sum: weight as f32,
        });
    }
    let (sum, weight) = accumulate(occ, dim, false);
    match normalized(&sum) {
        Some(vector) => ClassResult::Fallback(FingerprintEntry {
            vector,
            occurrence_count: count,
            weight_sum: weight as f32,
        }),
        None => ClassResult::Dropped,
    }
}

/// Builds one unit-norm fingerprint per class.
///
/// A class whose weighted sum cancels (norm below [`DEGENERATE_NORM`]) falls
/// back to the unweighted mean direction; its `weight_sum` then records the
/// unit weights actually used. If that cancels too, the class is dropped.
pub fn build_fingerprints(
    occurrences: &Occurrences<'_>,
    mut meta: FingerprintMeta,
) -> Result<BuildOutcome, FingerprintError> {
    if occurrences.classes.is_empty() {
        return Err(FingerprintError::NoFingerprints);
    }
    let dim = meta.dim;
    for o in occurrences.classes.values().flatten() {
        if o.hidden.len() != dim {
            return Err(FingerprintError::DimensionMismatch {
                expected: dim,
                found: o.hidden.len(),
            });
        }
    }
    let groups: Vec<_> = occurrences.classes.iter().collect();
    let results: Vec<(TokenClass, ClassResult)> = groups
        .par_iter()
        .map(|(class, occ)| (**class, build_class(occ, dim)))
        .collect();

    let mut entries = BTreeMap::new();
    let mut fallbacks = Vec::new();
    let mut dropped = Vec::new();
    for (class, r) in results {
        match r {
            ClassResult::Weighted(e) => {
                entries.insert(class, e);
            }
            ClassResult::Fallback(e) => {
                fallbacks.push(class);
                entries.insert(class, e);
            }
            ClassResult::Dropped => dropped.push(class),
        }
    }
    if !dropped.is_empty() {
        log::warn!(
            "{} classes dropped: hidden states cancel out",
            dropped.len()
        );
    }
    if entries.is_empty() {
        return Err(FingerprintError::NoFingerprints);
    }
    if meta.validation_sample_ids.is_empty() {
        meta.validation_sample_ids = occurrences.sample_ids.clone();
    }
    Ok(BuildOutcome {
        dictionary: FingerprintDictionary { meta, entries },
        fallbacks,
        dropped,
    })
}

/// Saliency, occurrence grouping and fingerprint construction over a whole
/// validation set. Records must share one hidden dimension.
pub fn fingerprint_validation_set(
    records: &[ValidationRecord],
    saliency: &SaliencyConfig,
    scope: ScoringScope,
) -> Result<BuildOutcome, FingerprintError> {
    saliency.validate()?;
    let first = records.first().ok_or(FingerprintError::NoFingerprints)?;
    let dim = first.dim;
    let available = records.iter().map(|r| r.layers).min().unwrap_or(0);
    let maps = records
        .par_iter()
        .map(|r| aggregated_saliency(r, saliency))
        .collect::<Result<Vec<_>, _>>()?;
    let occurrences = collect_occurrences(records.iter().zip(&maps), scope)?;
    let mut meta = FingerprintMeta::new(dim, saliency, scope);
    meta.layers_used = saliency.effective_layers(available);
    build_fingerprints(&occurrences, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(dim: usize) -> FingerprintMeta {
        FingerprintMeta::new(dim, &SaliencyConfig::default(), ScoringScope::All)
    }

    fn occ<'a>(id: &'a str, pos: usize, alpha: f64, hidden: &'a [f32]) -> Occurrence<'a> {
        Occurrence {
            sample_id: id,
            position: pos,
            alpha,
            hidden,
        }
    }

    fn single(class: u32, list: Vec<Occurrence<'_>>) -> Occurrences<'_> {
        let mut o = Occurrences::default();
        o.classes.insert(TokenClass(class), list);
        o
    }

    #[test]
    fn single_occurrence_is_scale_free() {
        let h = [3.0f32, 4.0];
        let o = single(1, vec![occ("a", 0, 0.4, &h)]);
        let d = build_fingerprints(&o, meta(2)).unwrap().dictionary;
        let v = &d.get(TokenClass(1)).unwrap().vector;
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn weighted_pair() {
        let (x, y) = ([1.0f32, 0.0], [0.0f32, 1.0]);
        let o = single(1, vec![occ("a", 0, 0.3, &x), occ("a", 1, 0.1, &y)]);
        let e = build_fingerprints(&o, meta(2)).unwrap().dictionary.entries[&TokenClass(1)].clone();
        // (0.3, 0.1) / |(0.3, 0.1)|, float64 reference
        assert!((e.vector[0] as f64 - 0.948_683_298_050_513_8).abs() < 1e-7);
        assert!((e.vector[1] as f64 - 0.316_227_766_016_837_94).abs() < 1e-7);
        assert_eq!(e.occurrence_count, 2);
        assert!((e.weight_sum - 0.4).abs() < 1e-7);
    }

    #[test]
    fn cancellation_is_dropped() {
        let (h, neg) = ([1.0f32, 2.0], [-1.0f32, -2.0]);
        let keep = [0.0f32, 1.0];
        let mut o = single(1, vec![occ("a", 0, 0.5, &h), occ("a", 1, 0.5, &neg)]);
        o.classes
            .insert(TokenClass(2), vec![occ("a", 2, 0.5, &keep)]);
        let out = build_fingerprints(&o, meta(2)).unwrap();
        assert_eq!(out.dropped, vec![TokenClass(1)]);
        assert!(!out.dictionary.contains(TokenClass(1)));
        assert!(out.dictionary.contains(TokenClass(2)));

        let only = single(1, vec![occ("a", 0, 0.5, &h), occ("a", 1, 0.5, &neg)]);
        assert!(matches!(
            build_fingerprints(&only, meta(2)),
            Err(FingerprintError::NoFingerprints)
        ));
    }

    #[test]
    fn zero_saliency_falls_back_to_mean() {
        let (x, y) = ([1.0f32, 0.0], [0.0f32, 2.0]);
        let o = single(4, vec![occ("a", 0, 0.0, &x), occ("b", 0, 0.0, &y)]);
        let out = build_fingerprints(&o, meta(2)).unwrap();
        assert_eq!(out.fallbacks, vec![TokenClass(4)]);
        let e = &out.dictionary.entries[&TokenClass(4)];
        let s = std::f32::consts::FRAC_1_SQRT_2;
        assert!((e.vector[0] - s).abs() < 1e-7 && (e.vector[1] - s).abs() < 1e-7);
        assert_eq!(e.weight_sum, 2.0);
    }

    #[test]
    fn empty_occurrences() {
        assert!(matches!(
            build_fingerprints(&Occurrences::default(), meta(2)),
            Err(FingerprintError::NoFingerprints)
        ));
    }

    #[test]
    fn scope_admission() {
        use Role::*;
        assert!(!ScoringScope::All.admits(Special));
        assert!(ScoringScope::All.admits(Prompt) && ScoringScope::All.admits(Response));
        assert!(ScoringScope::PromptOnly.admits(Prompt));
        assert!(!ScoringScope::PromptOnly.admits(Response));
        assert!(ScoringScope::ResponseOnly.admits(Response));
        assert!(!ScoringScope::ResponseOnly.admits(Prompt));
    }

    fn val_record(id: &str, tokens: &[u32], roles: Vec<Role>, dim: usize) -> ValidationRecord {
        let t = tokens.len();
        ValidationRecord {
            sample_id: id.into(),
            token_ids: tokens.iter().copied().map(TokenClass).collect(),
            roles,
            hidden: (0..t * dim).map(|x| 1.0 + x as f32).collect(),
            attention: vec![],
            dim,
            layers: 0,
            heads: 0,
        }
    }

    fn flat_map(t: usize) -> SaliencyMap {
        SaliencyMap {
            q: vec![0.5; t],
            k: vec![0.5; t],
            alpha: vec![0.5; t],
        }
    }

    #[test]
    fn occurrences_are_grouped_by_class() {
        let r = val_record("s", &[7, 7, 9], vec![Role::Prompt; 3], 2);
        let m = flat_map(3);
        let o = collect_occurrences([(&r, &m)], ScoringScope::All).unwrap();
        assert_eq!(o.classes[&TokenClass(7)].len(), 2);
        assert_eq!(o.classes[&TokenClass(9)].len(), 1);
        assert_eq!(o.total(), 3);

        let o = collect_occurrences([(&r, &m)], ScoringScope::ResponseOnly).unwrap();
        assert!(o.classes.is_empty());
    }

    #[test]
    fn special_and_zero_norm_positions_are_excluded() {
        let mut r = val_record(
            "s",
            &[1, 2, 3],
            vec![Role::Special, Role::Prompt, Role::Response],
            2,
        );
        r.hidden[4] = 0.0;
        r.hidden[5] = 0.0;
        let m = flat_map(3);
        let o = collect_occurrences([(&r, &m)], ScoringScope::All).unwrap();
        assert_eq!(
            o.classes.keys().copied().collect::<Vec<_>>(),
            vec![TokenClass(2)]
        );
        assert_eq!(o.zero_norm_dropped, 1);
    }

    #[test]
    fn mismatched_lengths_and_duplicates_are_rejected() {
        let r = val_record("s", &[1, 2], vec![Role::Prompt; 2], 2);
        let m = flat_map(3);
        assert!(matches!(
            collect_occurrences([(&r, &m)], ScoringScope::All),
            Err(FingerprintError::LengthMismatch { .. })
        ));
        let m = flat_map(2);
        assert!(matches!(
            collect_occurrences([(&r, &m), (&r, &m)], ScoringScope::All),
            Err(FingerprintError::DuplicateSample(_))
        ));
    }
}
