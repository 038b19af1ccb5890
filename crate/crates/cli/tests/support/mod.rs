#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};
use std::process::Command;

use trim_core::interchange::{
    write_candidate_file, write_embedding_file, write_manifest, write_validation_file,
    CandidateHeader, ValidationHeader,
};
use trim_core::synth::{generate, SynthCorpus, SynthSpec};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn trim<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = Command::new(env!("CARGO_BIN_EXE_trim"))
        .args(args)
        .env("TRIM_LOG", "error")
        .output()
        .expect("trim binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Runs and insists on exit 0.
pub fn ok<I, S>(args: I) -> Run
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let r = trim(args);
    assert_eq!(r.code, 0, "stderr: {}", r.stderr);
    r
}

pub struct Files {
    pub validation: PathBuf,
    pub candidates: PathBuf,
    pub shards: Vec<PathBuf>,
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
}

/// Writes a generated corpus to `dir`: one full candidate file plus the same
/// records split into `shards` files.
pub fn write_corpus(dir: &Path, corpus: &SynthCorpus, spec: &SynthSpec, shards: usize) -> Files {
    let files = Files {
        validation: dir.join("validation.trmv"),
        candidates: dir.join("candidates.trmc"),
        shards: (0..shards)
            .map(|i| dir.join(format!("shard-{i}.trmc")))
            .collect(),
        embeddings: dir.join("embeddings.trme"),
        manifest: dir.join("manifest.jsonl"),
    };
    write_validation_file(
        &files.validation,
        ValidationHeader {
            dtype: spec.dtype,
            dim: spec.dim,
            layers: spec.layers,
            heads: spec.heads,
        },
        &corpus.validation,
    )
    .unwrap();
    let header = CandidateHeader {
        dtype: spec.dtype,
        dim: spec.dim,
    };
    write_candidate_file(&files.candidates, header, &corpus.candidates).unwrap();
    let per = corpus.candidates.len().div_ceil(shards.max(1)).max(1);
    for (i, p) in files.shards.iter().enumerate() {
        let lo = (i * per).min(corpus.candidates.len());
        let hi = ((i + 1) * per).min(corpus.candidates.len());
        write_candidate_file(p, header, &corpus.candidates[lo..hi]).unwrap();
    }
    write_embedding_file(&files.embeddings, &corpus.embeddings, spec.dtype).unwrap();
    write_manifest(&files.manifest, &corpus.manifest).unwrap();
    files
}

pub fn generate_files(dir: &Path, spec: &SynthSpec, shards: usize) -> (SynthCorpus, Files) {
    let corpus = generate(spec);
    let files = write_corpus(dir, &corpus, spec, shards);
    (corpus, files)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
