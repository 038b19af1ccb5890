//! Binary interchange formats shared between the activation extractor and the
//! selection engine.
//!
//! Every container is little-endian and row-major, and records are written at
//! their true length (no padding is ever stored).
//!
//! | magic  | contents                                                        |
//! |--------|-----------------------------------------------------------------|
//! | `TRMV` | validation records: tokens, roles, hidden states, attention     |
//! | `TRMC` | candidate records: tokens, roles, hidden states                 |
//! | `TRME` | input-embedding rows keyed by token class                       |
//! | `TRMF` | fingerprint dictionaries, see [`crate::fingerprint`]            |
//!
//! Corpus metadata travels separately as a JSON-lines [`CorpusManifest`].

mod codec;
mod embedding;
mod manifest;
mod records;
mod validate;

use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{read_embedding_file, write_embedding_file, EmbeddingTable};
pub use manifest::{read_manifest, write_manifest, CorpusManifest, ManifestEntry, ManifestError};
pub use records::{
    read_candidate_file, read_candidate_stream, read_validation_file, write_candidate_file,
    write_validation_file, CandidateHeader, CandidateReader, CandidateRecord, CandidateWriter,
    ValidationHeader, ValidationReader, ValidationRecord, ValidationWriter,
};
pub use validate::{validate_file, Check, Offender, ValidateOptions, ValidationReport};

pub(crate) use codec::{sibling_temp, FrameReader, FrameWriter};

pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on a record's sequence length. Larger values are treated as a
/// corrupt frame rather than an allocation request.
pub const MAX_SEQ_LEN: usize = 1 << 24;

/// A vocabulary id. All occurrences of one id form one token class.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
#[repr(transparent)]
pub struct TokenClass(pub u32);

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<u32> for TokenClass {
    fn from(id: u32) -> Self {
        TokenClass(id)
    }
}

/// Per-position role code carried by every record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Template and control tokens (BOS, EOS, PAD, chat markers). Never scored.
    Special = 0,
    Prompt = 1,
    Response = 2,
}

impl Role {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Role> {
        match code {
            0 => Some(Role::Special),
            1 => Some(Role::Prompt),
            2 => Some(Role::Response),
            _ => None,
        }
    }
}

/// On-disk element type. Arithmetic always happens after widening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32 = 0,
    F16 = 1,
}

impl Dtype {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F16),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }

    /// Value as it reads back after a write in this dtype.
    pub fn quantize(self, v: f32) -> f32 {
        match self {
            Dtype::F32 => v,
            Dtype::F16 => half::f16::from_f32(v).to_f32(),
        }
    }

    /// Allowed deviation of an attention row sum from 1.
    pub fn row_sum_tolerance(self) -> f64 {
        match self {
            Dtype::F32 => 1e-5,
            Dtype::F16 => 1e-3,
        }
    }
}

/// Container kind, identified by the leading magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Validation,
    Candidate,
    Embedding,
    Fingerprint,
}

impl FileKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            FileKind::Validation => b"TRMV",
            FileKind::Candidate => b"TRMC",
            FileKind::Embedding => b"TRME",
            FileKind::Fingerprint => b"TRMF",
        }
    }

    pub fn from_magic(magic: &[u8; 4]) -> Option<FileKind> {
        [
            FileKind::Validation,
            FileKind::Candidate,
            FileKind::Embedding,
            FileKind::Fingerprint,
        ]
        .into_iter()
        .find(|k| k.magic() == magic)
    }
}

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("file truncated at byte {offset} while reading {context}")]
    Truncated { offset: u64, context: String },
    #[error("corrupt frame at byte {offset} ({context}): {reason}")]
    Corrupt {
        offset: u64,
        context: String,
        reason: String,
    },
    #[error("record {index} rejected: {reason}")]
    RejectRecord { index: usize, reason: String },
}

impl FormatError {
    pub fn is_truncation(&self) -> bool {
        matches!(self, FormatError::Truncated { .. })
    }
}

pub(crate) fn magic_string(magic: &[u8]) -> String {
    magic
        .iter()
        .map(|&b| {
            if b.is_ascii_graphic() {
                (b as char).to_string()
            } else {
                format!("\\x{b:02x}")
            }
        })
        .collect()
}
