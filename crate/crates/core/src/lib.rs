//! Forward-only coreset selection for instruction tuning.
//!
//! A handful of target-task samples, run through the scoring model, give
//! attention maps and last-layer hidden states. Attention sharpness and
//! received attention weight each token ([`saliency`]); the weighted, unit
//! normalized hidden states per vocabulary id form a fingerprint dictionary
//! ([`fingerprint`]). Candidate samples are scored token by token against
//! those fingerprints and pooled into one number ([`scorer`]), and the best
//! candidates under a budget form the coreset ([`select`], [`report`]).
//!
//! All model activations arrive through the binary files in [`interchange`].

pub mod config;
pub mod fingerprint;
pub mod interchange;
pub mod report;
pub mod saliency;
pub mod scorer;
pub mod select;
pub mod synth;

pub use config::{ConfigError, PipelineConfig};
pub use fingerprint::{
    build_fingerprints, collect_occurrences, fingerprint_validation_set, load_fingerprints,
    save_fingerprints, BuildOutcome, FingerprintDictionary, FingerprintEntry, FingerprintError,
    FingerprintMeta, ScoringScope,
};
pub use interchange::{
    CandidateRecord, CorpusManifest, Dtype, EmbeddingTable, FormatError, ManifestEntry, Role,
    TokenClass, ValidationRecord,
};
pub use saliency::{aggregated_saliency, SaliencyConfig, SaliencyError, SaliencyMap};
pub use scorer::{
    score_corpus, CorpusOptions, OovPolicy, OovResolver, ScoreError, ScoreRecord, Scorer,
    ScoringConfig,
};
pub use select::{select_top, Budget, Candidate, SelectionManifest, TopK};
