//! Plain float64 reimplementation of the whole scoring pipeline, written for
//! clarity: no sorting tricks, no fixed point, no caching, no parallelism.
//! Only the record containers are shared with the engine.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeMap;

use trim_core::{CandidateRecord, EmbeddingTable, Role, ValidationRecord};

#[derive(Debug, Clone, Copy)]
pub struct Settings {
    pub layers: usize,
    pub w_q: f64,
    pub w_k: f64,
    pub eps: f64,
    pub lambda: f64,
    pub w_mu: f64,
    pub w_m: f64,
    pub eta: f64,
    /// "all", "prompt" or "response".
    pub scope: &'static str,
    pub backoff: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            layers: 6,
            w_q: 0.5,
            w_k: 0.5,
            eps: 1e-8,
            lambda: 1.0,
            w_mu: 0.5,
            w_m: 0.5,
            eta: 0.05,
            scope: "all",
            backoff: true,
        }
    }
}

fn in_scope(s: &Settings, role: Role) -> bool {
    match role {
        Role::Special => false,
        Role::Prompt => s.scope != "response",
        Role::Response => s.scope != "prompt",
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn as_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// Aggregated saliency alpha for every position of one record.
pub fn alpha(r: &ValidationRecord, s: &Settings) -> Vec<f64> {
    let t = r.len();
    let used = s.layers.min(r.layers);
    let first = r.layers - used;
    let a = |l: usize, h: usize, i: usize, j: usize| -> f64 {
        r.attention[((l * r.heads + h) * t + i) * t + j] as f64
    };

    let mut q = vec![0.0; t];
    for i in 0..t {
        let mut acc = 0.0;
        for l in first..r.layers {
            for h in 0..r.heads {
                let n = (0..t).filter(|&j| a(l, h, i, j) > 0.0).count();
                let qi = if n == 1 {
                    1.0
                } else {
                    let ent: f64 = (0..t)
                        .map(|j| -a(l, h, i, j) * (a(l, h, i, j) + s.eps).ln())
                        .sum();
                    (1.0 - ent / (n as f64).ln()).clamp(0.0, 1.0)
                };
                acc += qi;
            }
        }
        q[i] = acc / (used * r.heads) as f64;
    }

    let mut k_raw = vec![0.0; t];
    let mut received = vec![false; t];
    for j in 0..t {
        let mut acc = 0.0;
        for l in first..r.layers {
            for h in 0..r.heads {
                let col: Vec<f64> = (0..t).map(|i| a(l, h, i, j)).filter(|&x| x > 0.0).collect();
                if !col.is_empty() {
                    received[j] = true;
                    acc += col.iter().sum::<f64>() / col.len() as f64;
                }
            }
        }
        k_raw[j] = acc / (used * r.heads) as f64;
    }
    let live: Vec<f64> = (0..t).filter(|&j| received[j]).map(|j| k_raw[j]).collect();
    let lo = live.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = live.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (0..t)
        .map(|j| {
            let k = if received[j] {
                (k_raw[j] - lo) / (hi - lo + s.eps)
            } else {
                0.0
            };
            (s.w_q * q[j] + s.w_k * k).clamp(0.0, 1.0)
        })
        .collect()
}

pub fn fingerprints(validation: &[ValidationRecord], s: &Settings) -> BTreeMap<u32, Vec<f64>> {
    let mut groups: BTreeMap<u32, Vec<(f64, Vec<f64>)>> = BTreeMap::new();
    for r in validation {
        let al = alpha(r, s);
        for i in 0..r.len() {
            let h = as_f64(r.hidden_row(i));
            let n = norm(&h);
            if !in_scope(s, r.roles[i]) || n == 0.0 {
                continue;
            }
            groups
                .entry(r.token_ids[i].0)
                .or_default()
                .push((al[i], h.iter().map(|x| x / n).collect()));
        }
    }
    let mut out = BTreeMap::new();
    for (class, occ) in groups {
        let dim = occ[0].1.len();
        let mut sum = vec![0.0; dim];
        for (a, h) in &occ {
            for d in 0..dim {
                sum[d] += a * h[d];
            }
        }
        if norm(&sum) < 1e-10 {
            sum = vec![0.0; dim];
            for (_, h) in &occ {
                for d in 0..dim {
                    sum[d] += h[d];
                }
            }
        }
        let n = norm(&sum);
        if n >= 1e-10 {
            out.insert(class, sum.iter().map(|x| x / n).collect());
        }
    }
    out
}

fn nearest(class: u32, emb: &EmbeddingTable, fps: &BTreeMap<u32, Vec<f64>>) -> u32 {
    let q = as_f64(emb.get(class.into()).expect("embedding for oov class"));
    let mut best = (u32::MAX, f64::NEG_INFINITY);
    for &t in fps.keys() {
        let c = cosine(
            &q,
            &as_f64(
                emb.get(t.into())
                    .expect("embedding for fingerprinted class"),
            ),
        );
        if c > best.1 {
            best = (t, c);
        }
    }
    best.0
}

/// Sample score, `-inf` when no token is scored.
pub fn score(
    c: &CandidateRecord,
    fps: &BTreeMap<u32, Vec<f64>>,
    emb: &EmbeddingTable,
    s: &Settings,
) -> f64 {
    let mut scores = Vec::new();
    for i in 0..c.len() {
        let h = as_f64(c.hidden_row(i));
        if !in_scope(s, c.roles[i]) || norm(&h) == 0.0 {
            continue;
        }
        let class = c.token_ids[i].0;
        if let Some(f) = fps.get(&class) {
            scores.push(cosine(&h, f));
        } else if s.backoff {
            let via = nearest(class, emb, fps);
            scores.push(s.lambda * cosine(&h, &fps[&via]));
        }
    }
    if scores.is_empty() {
        return f64::NEG_INFINITY;
    }
    let mu = scores.iter().sum::<f64>() / scores.len() as f64;
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    s.w_mu * mu + s.w_m * m + s.eta * scores.len() as f64 / c.len() as f64
}

/// Ids of the `k` best finite scores under (score desc, id asc).
pub fn top_k(scores: &BTreeMap<String, f64>, k: usize) -> Vec<String> {
    let mut v: Vec<(&String, f64)> = scores
        .iter()
        .filter(|(_, s)| s.is_finite())
        .map(|(i, &s)| (i, s))
        .collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
    v.into_iter().take(k).map(|(i, _)| i.clone()).collect()
}
