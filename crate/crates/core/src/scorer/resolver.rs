use std::collections::HashMap;
use std::sync::RwLock;

use super::ScoreError;
use crate::fingerprint::FingerprintDictionary;
use crate::interchange::{EmbeddingTable, TokenClass};

fn unit(v: &[f32]) -> Vec<f64> {
    let norm = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| x as f64 / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the row with the largest dot product; first row wins ties.
fn argmax(query: &[f64], rows: &[f64], dim: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.chunks_exact(dim.max(1)).enumerate() {
        let c = dot(query, row);
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

/// Nearest fingerprinted class to `class` by cosine similarity of input
/// embeddings, ties broken by lowest class id. Uncached.
pub fn resolve_oov(
    class: TokenClass,
    embeddings: &EmbeddingTable,
    dict: &FingerprintDictionary,
) -> Result<TokenClass, ScoreError> {
    let query = embeddings
        .get(class)
        .ok_or(ScoreError::EmbeddingGap(class))?;
    let query = unit(query);
    let mut best: Option<(TokenClass, f64)> = None;
    for t in dict.classes() {
        let e = embeddings.get(t).ok_or(ScoreError::EmbeddingGap(t))?;
        let c = dot(&query, &unit(e));
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((t, c));
        }
    }
    best.map(|(t, _)| t).ok_or(ScoreError::EmbeddingGap(class))
}

/// Memoized per-class backoff over the dictionary's unit-normalized input
/// embeddings. Safe to share across scoring threads; each class resolves to the
/// same answer whichever thread computes it first.
#[derive(Debug)]
pub struct OovResolver {
    dim: usize,
    classes: Vec<TokenClass>,
    unit_rows: Vec<f64>,
    embeddings: Option<EmbeddingTable>,
    cache: RwLock<HashMap<TokenClass, TokenClass>>,
}

impl OovResolver {
    /// Fails with `EmbeddingGap` if a fingerprinted class has no embedding row.
    pub fn new(
        embeddings: EmbeddingTable,
        dict: &FingerprintDictionary,
    ) -> Result<Self, ScoreError> {
        let dim = embeddings.dim();
        let classes: Vec<TokenClass> = dict.classes().collect();
        let mut unit_rows = Vec::with_capacity(classes.len() * dim);
        for &t in &classes {
            let e = embeddings.get(t).ok_or(ScoreError::EmbeddingGap(t))?;
            unit_rows.extend(unit(e));
        }
        Ok(OovResolver {
            dim,
            classes,
            unit_rows,
            embeddings: Some(embeddings),
            cache: RwLock::new(HashMap::new()),
        })
    }

    /// A resolver that reports every lookup as an embedding gap.
    pub fn without_embeddings() -> Self {
        OovResolver {
            dim: 0,
            classes: Vec::new(),
            unit_rows: Vec::new(),
            embeddings: None,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn resolve(&self, class: TokenClass) -> Result<TokenClass, ScoreError> {
        if let Some(&t) = self.cache.read().unwrap().get(&class) {
            return Ok(t);
        }
        let query = self
            .embeddings
            .as_ref()
            .and_then(|e| e.get(class))
            .ok_or(ScoreError::EmbeddingGap(class))?;
        let i = argmax(&unit(query), &self.unit_rows, self.dim)
            .ok_or(ScoreError::EmbeddingGap(class))?;
        let resolved = self.classes[i];
        self.cache.write().unwrap().entry(class).or_insert(resolved);
        Ok(resolved)
    }

    pub fn cached(&self) -> usize {
        self.cache.read().unwrap().len()
    }
}
