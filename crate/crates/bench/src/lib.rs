//! Shared fixtures for the pipeline benchmarks.

use trim_core::synth::{generate, SynthCorpus, SynthSpec};
use trim_core::{
    fingerprint_validation_set, Candidate, FingerprintDictionary, OovResolver, SaliencyConfig,
    ScoringScope,
};

/// Synthetic corpus with `candidates` records of exactly `len` tokens.
pub fn corpus(candidates: usize, len: usize, dim: usize) -> SynthCorpus {
    generate(&SynthSpec {
        seed: 17,
        dim,
        candidates,
        candidate_len: (len, len),
        validation_len: (len.min(64), len.min(64)),
        layers: 4,
        heads: 4,
        vocab: 512,
        task_vocab: 128,
        embedding_dim: 64,
        ..SynthSpec::default()
    })
}

pub fn dictionary(c: &SynthCorpus) -> (FingerprintDictionary, OovResolver) {
    let dict =
        fingerprint_validation_set(&c.validation, &SaliencyConfig::default(), ScoringScope::All)
            .expect("synthetic validation set fingerprints")
            .dictionary;
    let resolver =
        OovResolver::new(c.embeddings.clone(), &dict).expect("embeddings cover the vocabulary");
    (dict, resolver)
}

/// `n` candidates with scores from a cheap integer hash, about 1% tied.
pub fn ranked(n: usize) -> Vec<Candidate> {
    (0..n)
        .map(|i| {
            let h = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
            Candidate {
                sample_id: format!("c{i:08}"),
                score: (h % 100_000) as f64 / 1e5,
                source: String::new(),
            }
        })
        .collect()
}
