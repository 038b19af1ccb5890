//! Seeded synthetic corpora for tests, benchmarks and demos.
//!
//! Every token class owns a random centroid; hidden states are centroid plus
//! Gaussian noise. Validation samples draw from a task vocabulary (the lower
//! part of the id range); each candidate mixes task and off-task tokens with
//! its own relevance share, so scores spread out. Attention is a causal
//! softmax over random logits with a per-head temperature.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::interchange::{
    CandidateRecord, CorpusManifest, Dtype, EmbeddingTable, ManifestEntry, Role, TokenClass,
    ValidationRecord,
};

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub vocab: u32,
    /// Classes `0..task_vocab` make up the target task's vocabulary.
    pub task_vocab: u32,
    pub dim: usize,
    pub embedding_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub validation_samples: usize,
    pub validation_len: (usize, usize),
    pub candidates: usize,
    /// Inclusive length range. Lengths of 1 or 2 yield all-special records.
    pub candidate_len: (usize, usize),
    pub noise: f32,
    pub dtype: Dtype,
    pub sources: Vec<String>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            vocab: 64,
            task_vocab: 24,
            dim: 16,
            embedding_dim: 16,
            layers: 2,
            heads: 2,
            validation_samples: 8,
            validation_len: (6, 32),
            candidates: 200,
            candidate_len: (1, 32),
            noise: 0.5,
            dtype: Dtype::F32,
            sources: vec!["cot".into(), "dolly".into(), "flan".into(), "oasst".into()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub validation: Vec<ValidationRecord>,
    pub candidates: Vec<CandidateRecord>,
    pub embeddings: EmbeddingTable,
    pub manifest: CorpusManifest,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct World {
    spec: SynthSpec,
    centroids: Vec<Vec<f32>>,
}

impl World {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centroids = (0..spec.vocab)
            .map(|_| gaussian(&mut rng, spec.dim))
            .collect();
        World {
            spec: spec.clone(),
            centroids,
        }
    }

    fn roles(&self, t: usize, rng: &mut ChaCha8Rng) -> Vec<Role> {
        let mut roles = vec![Role::Prompt; t];
        roles[0] = Role::Special;
        if t >= 2 {
            roles[t - 1] = Role::Special;
        }
        if t > 3 {
            let split = rng.random_range(1..t - 1);
            for r in &mut roles[split..t - 1] {
                *r = Role::Response;
            }
        }
        roles
    }

    fn tokens(&self, t: usize, relevance: f64, rng: &mut ChaCha8Rng) -> Vec<TokenClass> {
        let s = &self.spec;
        (0..t)
            .map(|_| {
                let id = if rng.random::<f64>() < relevance {
                    rng.random_range(0..s.task_vocab.max(1))
                } else {
                    rng.random_range(0..s.vocab)
                };
                TokenClass(id)
            })
            .collect()
    }

    fn hidden(&self, tokens: &[TokenClass], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(tokens.len() * s.dim);
        for t in tokens {
            let c = &self.centroids[t.0 as usize];
            for &x in c {
                let n: f32 = StandardNormal.sample(rng);
                out.push(s.dtype.quantize(x + s.noise * n));
            }
        }
        out
    }

    fn attention(&self, t: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(s.layers * s.heads * t * t);
        for _ in 0..s.layers {
            for _ in 0..s.heads {
                let temperature = 0.25 + 4.0 * rng.random::<f64>();
                for i in 0..t {
                    let logits: Vec<f64> = (0..=i)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            z * temperature
                        })
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                    let z: f64 = exp.iter().sum();
                    out.extend(exp.iter().map(|e| s.dtype.quantize((e / z) as f32)));
                    out.extend(std::iter::repeat_n(0.0, t - i - 1));
                }
            }
        }
        out
    }

    fn validation(&self, idx: usize) -> ValidationRecord {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0x5a17_0000_0000_0000 ^ idx as u64);
        let t = rng.random_range(s.validation_len.0.max(1)..=s.validation_len.1.max(1));
        let token_ids = self.tokens(t, 1.0, &mut rng);
        ValidationRecord {
            sample_id: format!("val-{idx:04}"),
            roles: self.roles(t, &mut rng),
            hidden: self.hidden(&token_ids, &mut rng),
            attention: self.attention(t, &mut rng),
            token_ids,
            dim: s.dim,
            layers: s.layers,
            heads: s.heads,
        }
    }

    fn candidate(&self, idx: usize) -> (CandidateRecord, ManifestEntry) {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xca4d_0000_0000_0000 ^ idx as u64);
        let t = rng.random_range(s.candidate_len.0.max(1)..=s.candidate_len.1.max(1));
        let relevance: f64 = rng.random();
        let token_ids = self.tokens(t, relevance, &mut rng);
        let roles = self.roles(t, &mut rng);
        let hidden = self.hidden(&token_ids, &mut rng);
        let source = if s.sources.is_empty() {
            String::new()
        } else {
            s.sources[rng.random_range(0..s.sources.len())].clone()
        };
        let sample_id = format!("cand-{idx:07}");
        let entry = ManifestEntry {
            sample_id: sample_id.clone(),
            source,
            n_tokens: t as u64,
            prompt_len: Some(roles.iter().filter(|&&r| r == Role::Prompt).count() as u64),
        };
        let rec = CandidateRecord {
            sample_id,
            token_ids,
            roles,
            hidden,
            dim: s.dim,
        };
        (rec, entry)
    }

    fn embeddings(&self) -> EmbeddingTable {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ 0xe3b0_0000_0000_0000);
        let mut table = EmbeddingTable::new(s.embedding_dim);
        for c in 0..s.vocab {
            let v = gaussian(&mut rng, s.embedding_dim)
                .into_iter()
                .map(|x| s.dtype.quantize(x))
                .collect();
            table.insert(TokenClass(c), v);
        }
        table
    }
}

pub fn generate(spec: &SynthSpec) -> SynthCorpus {
    let world = World::new(spec);
    let validation = (0..spec.validation_samples)
        .map(|i| world.validation(i))
        .collect();
    let (candidates, entries): (Vec<_>, Vec<_>) =
        (0..spec.candidates).map(|i| world.candidate(i)).unzip();
    SynthCorpus {
        validation,
        candidates,
        embeddings: world.embeddings(),
        manifest: CorpusManifest::from_entries(entries).expect("generated ids are unique"),
    }
}

/// Candidates with their manifest rows, generated lazily. Record `i` is the
/// same as in [`generate`] for the same spec.
pub fn candidate_stream(
    spec: &SynthSpec,
) -> impl Iterator<Item = (CandidateRecord, ManifestEntry)> {
    let world = World::new(spec);
    (0..spec.candidates).map(move |i| world.candidate(i))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_well_formed() {
        let spec = SynthSpec {
            candidates: 20,
            ..SynthSpec::default()
        };
        let a = generate(&spec);
        let b = generate(&spec);
        assert_eq!(a.validation, b.validation);
        assert_eq!(a.candidates, b.candidates);
        let streamed: Vec<_> = candidate_stream(&spec).map(|(c, _)| c).collect();
        assert_eq!(streamed, a.candidates);
        for v in &a.validation {
            for l in 0..v.layers {
                for h in 0..v.heads {
                    for i in 0..v.len() {
                        let row = v.attention_row(l, h, i);
                        let sum: f64 = row.iter().map(|&x| x as f64).sum();
                        assert!((sum - 1.0).abs() < 1e-5);
                        assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                    }
                }
            }
        }
        assert_eq!(a.embeddings.len(), spec.vocab as usize);
        assert_eq!(a.manifest.len(), 20);
    }
}
