use std::collections::HashSet;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use super::{
    magic_string, CandidateReader, FileKind, FormatError, ValidationReader, ValidationRecord,
};
use crate::fingerprint::{self, FingerprintError, UNIT_NORM_TOLERANCE};

#[derive(Debug, Clone, Default)]
pub struct ValidateOptions {
    /// Hidden dimension the caller intends to pair this file with.
    pub expected_dim: Option<usize>,
}

/// Where a check first failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Offender {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
    pub detail: String,
}

impl Offender {
    fn new(detail: impl Into<String>) -> Self {
        Offender {
            record: None,
            sample_id: None,
            layer: None,
            head: None,
            row: None,
            detail: detail.into(),
        }
    }

    fn record(mut self, ordinal: u64, sample_id: Option<&str>) -> Self {
        self.record = Some(ordinal);
        self.sample_id = sample_id.map(str::to_string);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub failures: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first: Option<Offender>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub path: String,
    pub kind: Option<FileKind>,
    pub records: u64,
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    fn pass(&mut self, name: &str) {
        self.entry(name);
    }

    fn fail(&mut self, name: &str, offender: Offender) {
        let c = self.entry(name);
        c.passed = false;
        c.failures += 1;
        if c.first.is_none() {
            c.first = Some(offender);
        }
    }

    fn entry(&mut self, name: &str) -> &mut Check {
        if let Some(i) = self.checks.iter().position(|c| c.name == name) {
            return &mut self.checks[i];
        }
        self.checks.push(Check {
            name: name.to_string(),
            passed: true,
            failures: 0,
            first: None,
        });
        self.checks.last_mut().unwrap()
    }

    fn format_error(&mut self, err: &FormatError, ordinal: Option<u64>) {
        let (name, detail) = match err {
            FormatError::BadMagic { .. } => ("magic", err.to_string()),
            FormatError::UnsupportedVersion(_) => ("version", err.to_string()),
            FormatError::UnknownDtype(_) => ("dtype", err.to_string()),
            FormatError::InvalidHeader(_) => ("header", err.to_string()),
            _ => ("framing", err.to_string()),
        };
        let mut o = Offender::new(detail);
        o.record = ordinal;
        self.fail(name, o);
    }
}

/// Checks a container's framing and every per-record invariant. Never
/// returns an error: each problem is a failed check in the report.
pub fn validate_file(path: impl AsRef<Path>, opts: &ValidateOptions) -> ValidationReport {
    let path = path.as_ref();
    let mut report = ValidationReport {
        path: path.display().to_string(),
        kind: None,
        records: 0,
        checks: Vec::new(),
    };

    let mut magic = [0u8; 4];
    let read = File::open(path).and_then(|mut f| f.read_exact(&mut magic));
    if let Err(e) = read {
        report.fail("magic", Offender::new(format!("cannot read magic: {e}")));
        return report;
    }
    let Some(kind) = FileKind::from_magic(&magic) else {
        report.fail(
            "magic",
            Offender::new(format!("unknown magic {:?}", magic_string(&magic))),
        );
        return report;
    };
    report.kind = Some(kind);
    report.pass("magic");

    match kind {
        FileKind::Validation => validate_trmv(path, opts, &mut report),
        FileKind::Candidate => validate_trmc(path, opts, &mut report),
        FileKind::Embedding => validate_trme(path, &mut report),
        FileKind::Fingerprint => validate_trmf(path, opts, &mut report),
    }
    report
}

fn check_dim(report: &mut ValidationReport, dim: usize, opts: &ValidateOptions) {
    if dim == 0 {
        report.fail("header", Offender::new("hidden dimension D is 0"));
    } else {
        report.pass("header");
    }
    if let Some(expected) = opts.expected_dim {
        if expected != dim {
            report.fail(
                "dimension",
                Offender::new(format!("file D={dim}, expected D={expected}")),
            );
        } else {
            report.pass("dimension");
        }
    }
}

fn check_unique(report: &mut ValidationReport, seen: &mut HashSet<String>, ordinal: u64, id: &str) {
    if !seen.insert(id.to_string()) {
        report.fail(
            "unique_ids",
            Offender::new(format!("duplicate sample_id {id:?}")).record(ordinal, Some(id)),
        );
    }
}

fn check_finite(
    report: &mut ValidationReport,
    ordinal: u64,
    id: Option<&str>,
    what: &str,
    values: &[f32],
) {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        report.fail(
            "finite",
            Offender::new(format!("non-finite {what} value at flat index {pos}"))
                .record(ordinal, id),
        );
    }
}

fn validate_trmv(path: &Path, opts: &ValidateOptions, report: &mut ValidationReport) {
    let reader = match ValidationReader::open(path) {
        Ok(r) => r,
        Err(e) => return report.format_error(&e, None),
    };
    let header = reader.header();
    report.pass("version");
    report.pass("dtype");
    check_dim(report, header.dim, opts);
    if header.layers == 0 || header.heads == 0 {
        report.fail(
            "header",
            Offender::new(format!(
                "L={} H={}: attention needs L, H >= 1",
                header.layers, header.heads
            )),
        );
    }
    for name in [
        "framing",
        "unique_ids",
        "finite",
        "row_stochastic",
        "causal_support",
        "nonzero_rows",
    ] {
        report.pass(name);
    }

    let tol = header.dtype.row_sum_tolerance();
    let mut seen = HashSet::new();
    let mut ordinal = 0u64;
    for item in reader {
        match item {
            Ok(rec) => {
                check_unique(report, &mut seen, ordinal, &rec.sample_id);
                check_finite(report, ordinal, Some(&rec.sample_id), "hidden", &rec.hidden);
                check_finite(
                    report,
                    ordinal,
                    Some(&rec.sample_id),
                    "attention",
                    &rec.attention,
                );
                check_attention(report, ordinal, &rec, tol);
                ordinal += 1;
            }
            Err(e) => {
                report.format_error(&e, Some(ordinal));
                break;
            }
        }
    }
    report.records = ordinal;
}

fn check_attention(report: &mut ValidationReport, ordinal: u64, rec: &ValidationRecord, tol: f64) {
    let t = rec.len();
    for layer in 0..rec.layers {
        for head in 0..rec.heads {
            for i in 0..t {
                let row = rec.attention_row(layer, head, i);
                let at = |detail: String| {
                    let mut o = Offender::new(detail).record(ordinal, Some(&rec.sample_id));
                    o.layer = Some(layer);
                    o.head = Some(head);
                    o.row = Some(i);
                    o
                };
                if let Some(j) = row[i + 1..].iter().position(|&a| a != 0.0) {
                    let j = i + 1 + j;
                    report.fail(
                        "causal_support",
                        at(format!(
                            "A[{layer},{head},{i},{j}] = {} above the diagonal",
                            row[j]
                        )),
                    );
                }
                // Causality is checked above; the sum runs over the whole row so
                // a leak shows up as exactly one failed check.
                if row[..=i].iter().all(|&a| a == 0.0) {
                    report.fail("nonzero_rows", at("attention row is all zeros".to_string()));
                    continue;
                }
                if let Some(j) = row.iter().position(|&a| a < 0.0) {
                    report.fail(
                        "row_stochastic",
                        at(format!("negative probability {} at key {j}", row[j])),
                    );
                    continue;
                }
                let sum: f64 = row.iter().map(|&a| a as f64).sum();
                if (sum - 1.0).abs() > tol {
                    report.fail("row_stochastic", at(format!("row sums to {sum}")));
                }
            }
        }
    }
}

fn validate_trmc(path: &Path, opts: &ValidateOptions, report: &mut ValidationReport) {
    let reader = match CandidateReader::open(path) {
        Ok(r) => r,
        Err(e) => return report.format_error(&e, None),
    };
    report.pass("version");
    report.pass("dtype");
    check_dim(report, reader.header().dim, opts);
    for name in ["framing", "unique_ids", "finite"] {
        report.pass(name);
    }
    let mut seen = HashSet::new();
    let mut ordinal = 0u64;
    for item in reader {
        match item {
            Ok(rec) => {
                check_unique(report, &mut seen, ordinal, &rec.sample_id);
                check_finite(report, ordinal, Some(&rec.sample_id), "hidden", &rec.hidden);
                ordinal += 1;
            }
            Err(e) => {
                report.format_error(&e, Some(ordinal));
                break;
            }
        }
    }
    report.records = ordinal;
}

fn validate_trme(path: &Path, report: &mut ValidationReport) {
    match super::read_embedding_file(path) {
        Ok(table) => {
            report.pass("version");
            report.pass("dtype");
            if table.dim() == 0 {
                report.fail("header", Offender::new("embedding dimension D_e is 0"));
            } else {
                report.pass("header");
            }
            report.pass("framing");
            report.pass("finite");
            for (i, (class, v)) in table.iter().enumerate() {
                if v.iter().any(|x| !x.is_finite()) {
                    let mut o = Offender::new(format!("class {class} has a non-finite component"));
                    o.record = Some(i as u64);
                    report.fail("finite", o);
                }
            }
            report.records = table.len() as u64;
        }
        Err(e) => report.format_error(&e, None),
    }
}

fn validate_trmf(path: &Path, opts: &ValidateOptions, report: &mut ValidationReport) {
    let dict = match fingerprint::read_fingerprints_unchecked(path) {
        Ok(d) => d,
        Err(FingerprintError::Format(e)) => return report.format_error(&e, None),
        Err(e) => return report.fail("framing", Offender::new(e.to_string())),
    };
    report.pass("version");
    check_dim(report, dict.meta.dim, opts);
    for name in ["framing", "finite", "unit_norm", "entry_counts"] {
        report.pass(name);
    }
    for (i, (class, entry)) in dict.entries.iter().enumerate() {
        let at = |detail: String| {
            let mut o = Offender::new(detail);
            o.record = Some(i as u64);
            o
        };
        if entry.vector.iter().any(|x| !x.is_finite()) {
            report.fail(
                "finite",
                at(format!("class {class} has a non-finite component")),
            );
            continue;
        }
        let norm = entry.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            report.fail("unit_norm", at(format!("class {class} has norm {norm}")));
        }
        if entry.occurrence_count == 0 || entry.weight_sum.is_nan() || entry.weight_sum <= 0.0 {
            report.fail(
                "entry_counts",
                at(format!(
                    "class {class}: occurrence_count={} weight_sum={}",
                    entry.occurrence_count, entry.weight_sum
                )),
            );
        }
    }
    report.records = dict.entries.len() as u64;
}
