//! TRMF container:
//! `"TRMF" | version u32 | D u32 | scope u8 | class_count u64 | meta_len u32 |
//! meta JSON | entries { class u32 | occurrence_count u32 | weight_sum f32 | vector f32[D] }`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::{
    FingerprintDictionary, FingerprintEntry, FingerprintError, FingerprintMeta, ScoringScope,
    UNIT_NORM_TOLERANCE,
};
use crate::interchange::{Dtype, FileKind, FormatError, FrameReader, FrameWriter, TokenClass};

/// What the caller intends to pair the dictionary with.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadExpectations {
    pub dim: Option<usize>,
    pub scope: Option<ScoringScope>,
}

pub fn save_fingerprints(
    dict: &FingerprintDictionary,
    path: impl AsRef<Path>,
) -> Result<(), FingerprintError> {
    let dim = dict.meta.dim;
    let meta = serde_json::to_vec(&dict.meta).map_err(|e| FingerprintError::Meta(e.to_string()))?;
    let mut w = FrameWriter::create(path.as_ref())?;
    w.preamble(FileKind::Fingerprint)?;
    w.u32(u32::try_from(dim).map_err(|_| FingerprintError::Meta(format!("D={dim} exceeds u32")))?)?;
    w.u8(dict.meta.scope.code())?;
    w.count_slot()?;
    w.u32(meta.len() as u32)?;
    w.raw(&meta)?;
    for (class, e) in &dict.entries {
        if e.vector.len() != dim {
            return Err(FingerprintError::DimensionMismatch {
                expected: dim,
                found: e.vector.len(),
            });
        }
        w.u32(class.0)?;
        w.u32(e.occurrence_count)?;
        w.f32(e.weight_sum)?;
        w.floats(Dtype::F32, &e.vector)?;
    }
    w.finish(dict.entries.len() as u64)?;
    Ok(())
}

/// Parses a TRMF file without checking norms or caller expectations.
pub fn read_fingerprints_unchecked(
    path: impl AsRef<Path>,
) -> Result<FingerprintDictionary, FingerprintError> {
    let file = File::open(path.as_ref()).map_err(FormatError::from)?;
    let mut r = FrameReader::new(BufReader::new(file));
    r.preamble(FileKind::Fingerprint)?;
    let dim = r.u32()? as usize;
    let scope_code = r.u8()?;
    let scope = ScoringScope::from_code(scope_code)
        .ok_or_else(|| FormatError::InvalidHeader(format!("unknown scope code {scope_code}")))?;
    let count = r.u64()?;
    let meta_len = r.u32()? as usize;
    r.set_context("meta");
    let meta_bytes = r.bytes(meta_len)?;
    let meta: FingerprintMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| r.corrupt(format!("meta is not valid JSON: {e}")))?;
    if meta.dim != dim {
        return Err(FingerprintError::Meta(format!(
            "meta D={} disagrees with header D={dim}",
            meta.dim
        )));
    }
    if meta.scope != scope {
        return Err(FingerprintError::Meta(format!(
            "meta scope {} disagrees with header scope {scope}",
            meta.scope
        )));
    }
    let mut entries = BTreeMap::new();
    for i in 0..count {
        r.set_context(format!("entry {i}"));
        let class = TokenClass(r.u32()?);
        let occurrence_count = r.u32()?;
        let weight_sum = r.f32()?;
        let vector = r.floats(Dtype::F32, dim)?;
        let entry = FingerprintEntry {
            vector,
            occurrence_count,
            weight_sum,
        };
        if entries.insert(class, entry).is_some() {
            return Err(r.corrupt(format!("duplicate class {class}")).into());
        }
    }
    r.set_context("end of entries");
    if !r.at_eof()? {
        return Err(r
            .corrupt(format!("trailing bytes after the declared {count} entries"))
            .into());
    }
    Ok(FingerprintDictionary { meta, entries })
}

/// Loads a dictionary, verifying unit norms and the caller's expectations.
pub fn load_fingerprints(
    path: impl AsRef<Path>,
    expect: &LoadExpectations,
) -> Result<FingerprintDictionary, FingerprintError> {
    let dict = read_fingerprints_unchecked(path)?;
    if let Some(expected) = expect.dim {
        if expected != dict.meta.dim {
            return Err(FingerprintError::DimensionMismatch {
                expected,
                found: dict.meta.dim,
            });
        }
    }
    if let Some(expected) = expect.scope {
        if expected != dict.meta.scope {
            return Err(FingerprintError::ScopeMismatch {
                expected,
                found: dict.meta.scope,
            });
        }
    }
    for (class, e) in &dict.entries {
        let norm = e.norm();
        // Written so that NaN fails both checks.
        let unit = (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE;
        let weighted = e.weight_sum > 0.0;
        if !unit {
            return Err(FingerprintError::NormViolation {
                class: *class,
                norm,
            });
        }
        if e.occurrence_count == 0 || !weighted {
            return Err(FingerprintError::Meta(format!(
                "class {class}: occurrence_count={} weight_sum={}",
                e.occurrence_count, e.weight_sum
            )));
        }
    }
    Ok(dict)
}
