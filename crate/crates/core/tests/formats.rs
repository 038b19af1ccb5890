use std::fs;
use std::path::Path;

use proptest::prelude::*;
use tempfile::TempDir;
use trim_core::fingerprint::{
    fingerprint_validation_set, load_fingerprints, read_fingerprints_unchecked, save_fingerprints,
    LoadExpectations,
};
use trim_core::interchange::{
    read_candidate_file, read_candidate_stream, read_embedding_file, read_manifest,
    read_validation_file, validate_file, write_candidate_file, write_embedding_file,
    write_manifest, write_validation_file, CandidateHeader, CandidateRecord, Dtype, FormatError,
    ValidateOptions, ValidationHeader, ValidationRecord,
};
use trim_core::synth::{generate, SynthSpec};
use trim_core::{FingerprintError, ScoringScope, TokenClass};

fn spec(seed: u64, dtype: Dtype) -> SynthSpec {
    SynthSpec {
        seed,
        candidates: 12,
        validation_samples: 4,
        validation_len: (2, 10),
        candidate_len: (1, 10),
        dim: 5,
        embedding_dim: 3,
        layers: 2,
        heads: 3,
        vocab: 20,
        task_vocab: 8,
        dtype,
        ..SynthSpec::default()
    }
}

fn vheader(s: &SynthSpec) -> ValidationHeader {
    ValidationHeader {
        dtype: s.dtype,
        dim: s.dim,
        layers: s.layers,
        heads: s.heads,
    }
}

fn cheader(s: &SynthSpec) -> CandidateHeader {
    CandidateHeader {
        dtype: s.dtype,
        dim: s.dim,
    }
}

fn quantized_v(r: &ValidationRecord, dtype: Dtype) -> ValidationRecord {
    let mut r = r.clone();
    r.hidden.iter_mut().for_each(|x| *x = dtype.quantize(*x));
    r.attention.iter_mut().for_each(|x| *x = dtype.quantize(*x));
    r
}

fn quantized_c(r: &CandidateRecord, dtype: Dtype) -> CandidateRecord {
    let mut r = r.clone();
    r.hidden.iter_mut().for_each(|x| *x = dtype.quantize(*x));
    r
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn record_files_round_trip(seed in any::<u64>(), half in any::<bool>()) {
        let dtype = if half { Dtype::F16 } else { Dtype::F32 };
        let s = spec(seed, dtype);
        let corpus = generate(&s);
        let dir = TempDir::new().unwrap();
        let v = dir.path().join("v.trmv");
        let c = dir.path().join("c.trmc");
        let e = dir.path().join("e.trme");
        let m = dir.path().join("m.jsonl");

        prop_assert_eq!(write_validation_file(&v, vheader(&s), &corpus.validation).unwrap(), 4);
        prop_assert_eq!(write_candidate_file(&c, cheader(&s), &corpus.candidates).unwrap(), 12);
        write_embedding_file(&e, &corpus.embeddings, dtype).unwrap();
        write_manifest(&m, &corpus.manifest).unwrap();

        let (h, back) = read_validation_file(&v).unwrap();
        prop_assert_eq!(h, vheader(&s));
        let expected: Vec<_> = corpus.validation.iter().map(|r| quantized_v(r, dtype)).collect();
        prop_assert_eq!(back, expected);

        let (h, back) = read_candidate_file(&c).unwrap();
        prop_assert_eq!(h, cheader(&s));
        let expected: Vec<_> = corpus.candidates.iter().map(|r| quantized_c(r, dtype)).collect();
        prop_assert_eq!(&back, &expected);
        let streamed: Vec<_> = read_candidate_stream(&c).unwrap().map(Result::unwrap).collect();
        prop_assert_eq!(streamed, expected);

        let table = read_embedding_file(&e).unwrap();
        prop_assert_eq!(table.dim(), 3);
        for (class, row) in corpus.embeddings.iter() {
            let q: Vec<f32> = row.iter().map(|&x| dtype.quantize(x)).collect();
            prop_assert_eq!(table.get(class).unwrap(), &q[..]);
        }

        let manifest = read_manifest(&m).unwrap();
        prop_assert_eq!(manifest.entries(), corpus.manifest.entries());

        for p in [&v, &c, &e] {
            let report = validate_file(p, &ValidateOptions::default());
            prop_assert!(report.passed(), "{:?}", report);
        }
    }

    #[test]
    fn fingerprint_files_round_trip(seed in any::<u64>()) {
        let s = spec(seed, Dtype::F32);
        let corpus = generate(&s);
        let mut dict = fingerprint_validation_set(&corpus.validation, &Default::default(), ScoringScope::All)
            .unwrap()
            .dictionary;
        dict.meta.config_hash = Some("abc".into());
        let dir = TempDir::new().unwrap();
        let f = dir.path().join("f.trmf");
        save_fingerprints(&dict, &f).unwrap();
        let back = load_fingerprints(&f, &LoadExpectations { dim: Some(5), scope: Some(ScoringScope::All) }).unwrap();
        prop_assert_eq!(&back, &dict);
        let opts = ValidateOptions { expected_dim: Some(5) };
        prop_assert!(validate_file(&f, &opts).passed());
    }
}

struct Fixture {
    _dir: TempDir,
    v: std::path::PathBuf,
    c: std::path::PathBuf,
    f: std::path::PathBuf,
    corpus: trim_core::synth::SynthCorpus,
    spec: SynthSpec,
}

fn fixture() -> Fixture {
    let s = spec(7, Dtype::F32);
    let corpus = generate(&s);
    let dir = TempDir::new().unwrap();
    let v = dir.path().join("v.trmv");
    let c = dir.path().join("c.trmc");
    let f = dir.path().join("f.trmf");
    write_validation_file(&v, vheader(&s), &corpus.validation).unwrap();
    write_candidate_file(&c, cheader(&s), &corpus.candidates).unwrap();
    let dict =
        fingerprint_validation_set(&corpus.validation, &Default::default(), ScoringScope::All)
            .unwrap()
            .dictionary;
    save_fingerprints(&dict, &f).unwrap();
    Fixture {
        _dir: dir,
        v,
        c,
        f,
        corpus,
        spec: s,
    }
}

fn failed_checks(path: &Path, opts: &ValidateOptions) -> Vec<String> {
    validate_file(path, opts)
        .failed()
        .map(|c| c.name.clone())
        .collect()
}

fn patch(path: &Path, offset: usize, bytes: &[u8]) {
    let mut data = fs::read(path).unwrap();
    data[offset..offset + bytes.len()].copy_from_slice(bytes);
    fs::write(path, data).unwrap();
}

const TRMV_HEADER: usize = 4 + 4 + 1 + 4 + 4 + 4 + 8;

/// Byte offset of attention value [layer 0, head 0, row 0, key 0] of the first record.
fn first_attention_offset(fx: &Fixture) -> usize {
    let r = &fx.corpus.validation[0];
    let t = r.len();
    TRMV_HEADER + 2 + r.sample_id.len() + 4 + 4 * t + t + 4 * t * fx.spec.dim
}

#[test]
fn generated_files_pass() {
    let fx = fixture();
    for p in [&fx.v, &fx.c, &fx.f] {
        assert!(failed_checks(
            p,
            &ValidateOptions {
                expected_dim: Some(5)
            }
        )
        .is_empty());
    }
}

#[test]
fn bad_magic() {
    let fx = fixture();
    patch(&fx.v, 0, b"XXXX");
    assert_eq!(failed_checks(&fx.v, &Default::default()), ["magic"]);
    assert!(matches!(
        read_validation_file(&fx.v),
        Err(FormatError::BadMagic { .. })
    ));
}

#[test]
fn truncation_reports_offset() {
    let fx = fixture();
    let data = fs::read(&fx.c).unwrap();
    let cut = data.len() - 7;
    fs::write(&fx.c, &data[..cut]).unwrap();
    assert_eq!(failed_checks(&fx.c, &Default::default()), ["framing"]);
    let err = read_candidate_file(&fx.c).unwrap_err();
    assert!(err.is_truncation(), "{err}");
    match err {
        FormatError::Truncated { offset, .. } => assert!(offset as usize <= cut),
        other => panic!("{other}"),
    }
    // Truncation inside the header.
    fs::write(&fx.c, &data[..10]).unwrap();
    assert!(read_candidate_file(&fx.c).unwrap_err().is_truncation());
}

#[test]
fn row_sum_violation() {
    let fx = fixture();
    patch(&fx.v, first_attention_offset(&fx), &0.7f32.to_le_bytes());
    assert_eq!(
        failed_checks(&fx.v, &Default::default()),
        ["row_stochastic"]
    );
}

#[test]
fn causal_leak() {
    let fx = fixture();
    let at = first_attention_offset(&fx);
    // Row 0 becomes [0.5, 0.5, 0, ...]: still sums to one, but sees the future.
    patch(&fx.v, at, &0.5f32.to_le_bytes());
    patch(&fx.v, at + 4, &0.5f32.to_le_bytes());
    assert_eq!(
        failed_checks(&fx.v, &Default::default()),
        ["causal_support"]
    );
}

#[test]
fn dimension_mismatch() {
    let fx = fixture();
    let opts = ValidateOptions {
        expected_dim: Some(6),
    };
    for p in [&fx.v, &fx.c, &fx.f] {
        assert_eq!(failed_checks(p, &opts), ["dimension"]);
    }
    let err = load_fingerprints(
        &fx.f,
        &LoadExpectations {
            dim: Some(6),
            scope: None,
        },
    )
    .unwrap_err();
    assert!(matches!(
        err,
        FingerprintError::DimensionMismatch {
            expected: 6,
            found: 5
        }
    ));
}

#[test]
fn norm_violation() {
    let fx = fixture();
    let dict = read_fingerprints_unchecked(&fx.f).unwrap();
    let meta_len = serde_json::to_vec(&dict.meta).unwrap().len();
    // First entry's first vector component, doubled.
    let at = 4 + 4 + 4 + 1 + 8 + 4 + meta_len + 4 + 4 + 4;
    let first = dict.entries.values().next().unwrap().vector[0];
    patch(&fx.f, at, &(first * 2.0 + 0.5).to_le_bytes());
    assert_eq!(failed_checks(&fx.f, &Default::default()), ["unit_norm"]);
    assert!(matches!(
        load_fingerprints(&fx.f, &LoadExpectations::default()),
        Err(FingerprintError::NormViolation { .. })
    ));
}

#[test]
fn other_corruptions() {
    let fx = fixture();

    // Unsupported version.
    patch(&fx.c, 4, &9u32.to_le_bytes());
    assert_eq!(failed_checks(&fx.c, &Default::default()), ["version"]);
    patch(&fx.c, 4, &1u32.to_le_bytes());

    // Unknown dtype code.
    patch(&fx.c, 8, &[7]);
    assert_eq!(failed_checks(&fx.c, &Default::default()), ["dtype"]);
    patch(&fx.c, 8, &[0]);

    // Trailing garbage after the declared records.
    let mut data = fs::read(&fx.c).unwrap();
    data.extend_from_slice(&[1, 2, 3]);
    fs::write(&fx.c, &data).unwrap();
    assert_eq!(failed_checks(&fx.c, &Default::default()), ["framing"]);

    // NaN in a hidden state.
    let r = &fx.corpus.validation[0];
    let hidden_at = TRMV_HEADER + 2 + r.sample_id.len() + 4 + 5 * r.len();
    patch(&fx.v, hidden_at, &f32::NAN.to_le_bytes());
    assert_eq!(failed_checks(&fx.v, &Default::default()), ["finite"]);
}

#[test]
fn duplicate_ids_and_writer_rejections() {
    let fx = fixture();
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("dup.trmc");
    let mut recs = fx.corpus.candidates[..2].to_vec();
    recs[1].sample_id = recs[0].sample_id.clone();
    write_candidate_file(&p, cheader(&fx.spec), &recs).unwrap();
    assert_eq!(failed_checks(&p, &Default::default()), ["unique_ids"]);

    let mut bad = fx.corpus.candidates[0].clone();
    bad.hidden.pop();
    let err =
        write_candidate_file(dir.path().join("x.trmc"), cheader(&fx.spec), [&bad]).unwrap_err();
    assert!(matches!(err, FormatError::RejectRecord { index: 0, .. }));
    assert!(
        !dir.path().join("x.trmc").exists(),
        "a failed write must not leave a file behind"
    );
}

#[test]
fn empty_files_round_trip() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("e.trmc");
    let h = CandidateHeader {
        dtype: Dtype::F16,
        dim: 4,
    };
    write_candidate_file(&p, h, std::iter::empty()).unwrap();
    let (back, recs) = read_candidate_file(&p).unwrap();
    assert_eq!(back, h);
    assert!(recs.is_empty());
    assert!(validate_file(&p, &Default::default()).passed());
}

#[test]
fn token_classes_survive_full_range() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("t.trmc");
    let rec = CandidateRecord {
        sample_id: "ünïcode-id".into(),
        token_ids: vec![TokenClass(0), TokenClass(u32::MAX)],
        roles: vec![trim_core::Role::Special, trim_core::Role::Response],
        hidden: vec![1.0, -2.5],
        dim: 1,
    };
    write_candidate_file(
        &p,
        CandidateHeader {
            dtype: Dtype::F32,
            dim: 1,
        },
        [&rec],
    )
    .unwrap();
    assert_eq!(read_candidate_file(&p).unwrap().1, vec![rec]);
}
