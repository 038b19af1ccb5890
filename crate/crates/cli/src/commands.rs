use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use trim_core::fingerprint::{
    fingerprint_validation_set, read_fingerprints_unchecked, save_fingerprints, UNIT_NORM_TOLERANCE,
};
use trim_core::interchange::{
    read_embedding_file, read_manifest, read_validation_file, validate_file, write_embedding_file,
    write_manifest, CandidateHeader, CandidateReader, CandidateWriter, CorpusManifest, Dtype,
    ValidateOptions, ValidationHeader, ValidationWriter,
};
use trim_core::report::{length_report, subset_report, DEFAULT_LENGTH_EDGES};
use trim_core::scorer::{read_scores, score_corpus, write_scores, CorpusOptions, ScoreEntry};
use trim_core::select::{
    read_selection, select_top, write_selection, Candidate, Exclusion, Selected,
};
use trim_core::synth::{candidate_stream, generate, SynthSpec};
use trim_core::{
    aggregated_saliency, Budget, FingerprintError, FormatError, OovPolicy, OovResolver,
    PipelineConfig, ScoreError, Scorer,
};

use crate::args::{Cli, Command, ConfigArgs, DtypeArg, EdgeArgs, SynthArgs};

/// A failed command: message for stderr plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub const GENERAL: u8 = 1;
    pub const INVALID: u8 = 2;
    pub const MISMATCH: u8 = 3;
    pub const USAGE: u8 = 64;

    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn general(m: impl Into<String>) -> Self {
        Self::new(Self::GENERAL, m)
    }

    fn invalid(m: impl Into<String>) -> Self {
        Self::new(Self::INVALID, m)
    }

    fn mismatch(m: impl Into<String>) -> Self {
        Self::new(Self::MISMATCH, m)
    }

    fn usage(m: impl Into<String>) -> Self {
        Self::new(Self::USAGE, m)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::general(e.to_string())
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Io(e) => Failure::general(e.to_string()),
            e => Failure::invalid(e.to_string()),
        }
    }
}

impl From<FingerprintError> for Failure {
    fn from(e: FingerprintError) -> Self {
        match e {
            FingerprintError::NoFingerprints => Failure::general(format!("NO_FINGERPRINTS: {e}")),
            FingerprintError::ScopeMismatch { .. } => Failure::mismatch(e.to_string()),
            FingerprintError::Format(e) => e.into(),
            e => Failure::invalid(e.to_string()),
        }
    }
}

impl From<ScoreError> for Failure {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::ConfigMismatch(_) => Failure::mismatch(e.to_string()),
            ScoreError::Config(_) => Failure::usage(e.to_string()),
            ScoreError::Workers(_) => Failure::general(e.to_string()),
            ScoreError::Format(e) => e.into(),
            e => Failure::invalid(e.to_string()),
        }
    }
}

fn context<E: std::fmt::Display>(what: impl std::fmt::Display) -> impl FnOnce(E) -> Failure {
    move |e| Failure::general(format!("{what}: {e}"))
}

fn effective_config(args: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let base = match &args.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::usage(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    let cfg = args.apply(base);
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

/// Peak resident set size in bytes, where the platform reports it.
fn peak_rss() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn rss_note() -> String {
    match peak_rss() {
        Some(b) => format!(", peak RSS {:.1} MiB", b as f64 / (1024.0 * 1024.0)),
        None => String::new(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut out = BufWriter::new(File::create(path).map_err(context(path.display()))?);
    serde_json::to_writer_pretty(&mut out, value).map_err(io::Error::from)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = effective_config(&cli.config)?;
    let workers = cli
        .config
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::usage("--workers must be at least 1"));
    }
    match cli.command {
        Command::Validate { files, dim, json } => validate(&files, dim, json),
        Command::Fingerprint { validation, out } => fingerprint(&cfg, &validation, &out),
        Command::Score {
            candidates,
            fingerprints,
            embeddings,
            manifest,
            out,
        } => score(
            &cfg,
            &candidates,
            &fingerprints,
            embeddings.as_deref(),
            manifest.as_deref(),
            &out,
            CorpusOptions {
                workers,
                strict: cli.config.strict,
                ..CorpusOptions::default()
            },
        ),
        Command::Select {
            scores,
            manifest,
            out_dir,
            edges,
        } => select(&cfg, &scores, &manifest, &out_dir, &edges),
        Command::Report {
            selection,
            manifest,
            out_dir,
            edges,
        } => report(&selection, &manifest, &out_dir, &edges),
        Command::Inspect {
            validation,
            sample,
            out,
        } => inspect(&cfg, &validation, sample.as_deref(), out.as_deref()),
        Command::Synth(args) => synth(&args),
        Command::Config => {
            #[derive(Serialize)]
            struct Echo<'a> {
                #[serde(flatten)]
                config: &'a PipelineConfig,
                config_hash: String,
            }
            let echo = Echo {
                config: &cfg,
                config_hash: cfg.config_hash(),
            };
            let text = serde_json::to_string_pretty(&echo).map_err(io::Error::from)?;
            println!("{text}");
            Ok(())
        }
    }
}

fn validate(files: &[PathBuf], dim: Option<usize>, json: bool) -> Result<(), Failure> {
    let opts = ValidateOptions { expected_dim: dim };
    let mut failed = 0usize;
    for f in files {
        let report = validate_file(f, &opts);
        if json {
            println!(
                "{}",
                serde_json::to_string(&report).map_err(io::Error::from)?
            );
        } else {
            let kind = report
                .kind
                .map_or("unknown".to_string(), |k| format!("{k:?}"));
            println!("{} ({kind}, {} records)", report.path, report.records);
            for c in &report.checks {
                let status = if c.passed { "ok" } else { "FAIL" };
                print!("  {status:4} {}", c.name);
                if !c.passed {
                    print!(" ({} failures)", c.failures);
                    if let Some(o) = &c.first {
                        print!(": {}", o.detail);
                        if let Some(id) = &o.sample_id {
                            print!(" [sample {id}]");
                        }
                    }
                }
                println!();
            }
        }
        failed += !report.passed() as usize;
    }
    if failed > 0 {
        return Err(Failure::invalid(format!(
            "{failed} of {} files failed validation",
            files.len()
        )));
    }
    Ok(())
}

fn fingerprint(cfg: &PipelineConfig, validation: &Path, out: &Path) -> Result<(), Failure> {
    let report = validate_file(validation, &ValidateOptions::default());
    if !report.passed() {
        let names: Vec<&str> = report.failed().map(|c| c.name.as_str()).collect();
        return Err(Failure::invalid(format!(
            "{} failed validation: {}",
            validation.display(),
            names.join(", ")
        )));
    }
    let (_, records) = read_validation_file(validation)?;
    let outcome = fingerprint_validation_set(&records, &cfg.saliency, cfg.scoring.scope)?;
    let mut dict = outcome.dictionary;
    dict.meta.config_hash = Some(cfg.config_hash());
    save_fingerprints(&dict, out)?;
    let occurrences: u64 = dict
        .entries
        .values()
        .map(|e| e.occurrence_count as u64)
        .sum();
    eprintln!(
        "built {} fingerprints from {} occurrences in {} samples (layers used {}, scope {}); {} fell back to the unweighted mean, {} dropped",
        dict.len(),
        occurrences,
        records.len(),
        dict.meta.layers_used,
        dict.meta.scope,
        outcome.fallbacks.len(),
        outcome.dropped.len()
    );
    for c in &outcome.dropped {
        log::warn!("class {c} dropped: hidden states cancel out");
    }
    Ok(())
}

fn score(
    cfg: &PipelineConfig,
    candidates: &[PathBuf],
    fingerprints: &Path,
    embeddings: Option<&Path>,
    manifest: Option<&Path>,
    out: &Path,
    opts: CorpusOptions,
) -> Result<(), Failure> {
    let hash = cfg.config_hash();
    let dict = read_fingerprints_unchecked(fingerprints)?;
    match &dict.meta.config_hash {
        Some(h) if *h != hash => {
            return Err(Failure::mismatch(format!(
                "{} was built under config {h}, this run is {hash}",
                fingerprints.display()
            )))
        }
        None => log::warn!("{} carries no config hash", fingerprints.display()),
        _ => {}
    }
    if dict.meta.scope != cfg.scoring.scope {
        return Err(Failure::mismatch(format!(
            "dictionary scope is {}, scoring scope is {}",
            dict.meta.scope, cfg.scoring.scope
        )));
    }
    for (class, e) in &dict.entries {
        if (e.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Failure::invalid(format!(
                "fingerprint of class {class} is not unit norm"
            )));
        }
    }

    let resolver = match (embeddings, cfg.scoring.oov_policy) {
        (Some(p), OovPolicy::Backoff) => OovResolver::new(read_embedding_file(p)?, &dict)?,
        (None, OovPolicy::Backoff) => {
            log::warn!("no embedding table given; unfingerprinted tokens will fail their records");
            OovResolver::without_embeddings()
        }
        (_, OovPolicy::Skip) => OovResolver::without_embeddings(),
    };
    let scorer = Scorer::new(&dict, &resolver, cfg.scoring)?;
    let sources: Option<CorpusManifest> = match manifest {
        Some(p) => Some(read_manifest(p).map_err(|e| Failure::invalid(e.to_string()))?),
        None => None,
    };

    let mut readers = Vec::with_capacity(candidates.len());
    for p in candidates {
        let r = CandidateReader::open(p)?;
        if r.header().dim != dict.meta.dim {
            return Err(Failure::invalid(format!(
                "{}: hidden width {} does not match the dictionary's {}",
                p.display(),
                r.header().dim,
                dict.meta.dim
            )));
        }
        readers.push(r);
    }

    let start = Instant::now();
    let (outcomes, summary) = score_corpus(
        readers.into_iter().flatten(),
        &scorer,
        sources.as_ref(),
        &opts,
    )?;
    let elapsed = start.elapsed().as_secs_f64();
    write_scores(out, &outcomes, Some(&hash)).map_err(context(out.display()))?;
    eprintln!(
        "scored {} records ({} empty scope, {} failed) in {:.3} s: {:.0} records/s, OOV token rate {:.2}%{}",
        summary.records,
        summary.empty_scope,
        summary.failed,
        elapsed,
        summary.records as f64 / elapsed.max(1e-9),
        100.0 * summary.oov_rate(),
        rss_note()
    );
    if summary.failed > 0 {
        for o in outcomes.iter().filter_map(|o| match o {
            trim_core::scorer::ScoreOutcome::Failed { sample_id, error } => {
                Some((sample_id, error))
            }
            _ => None,
        }) {
            log::warn!("sample {}: {}", o.0, o.1);
        }
    }
    Ok(())
}

fn edges(args: &EdgeArgs) -> Vec<u64> {
    args.edges
        .clone()
        .unwrap_or_else(|| DEFAULT_LENGTH_EDGES.to_vec())
}

/// Common config hash of a set of artifacts; differing hashes are an error.
fn common_hash<'a>(
    hashes: impl IntoIterator<Item = Option<&'a str>>,
    what: &Path,
) -> Result<Option<String>, Failure> {
    let mut seen: Option<Option<&str>> = None;
    for h in hashes {
        match seen {
            None => seen = Some(h),
            Some(prev) if prev != h => {
                return Err(Failure::mismatch(format!(
                    "{} mixes entries from config {} and {}",
                    what.display(),
                    prev.unwrap_or("<none>"),
                    h.unwrap_or("<none>")
                )))
            }
            _ => {}
        }
    }
    Ok(seen.flatten().map(str::to_string))
}

fn write_reports(
    out_dir: &Path,
    selected: &[Selected],
    corpus: &CorpusManifest,
    edges: &[u64],
    hash: Option<&str>,
) -> Result<(), Failure> {
    let ids = || selected.iter().map(|s| s.sample_id.as_str());
    let mut length = length_report(ids(), corpus, edges).map_err(|e| match e {
        trim_core::report::ReportError::Edges(_) => Failure::usage(e.to_string()),
        e => Failure::invalid(e.to_string()),
    })?;
    let mut subset = subset_report(ids(), corpus).map_err(|e| Failure::invalid(e.to_string()))?;
    length.config_hash = hash.map(str::to_string);
    subset.config_hash = hash.map(str::to_string);
    let io = |e: trim_core::report::ReportError| Failure::general(e.to_string());
    length
        .write_csv(out_dir.join("length_report.csv"))
        .map_err(io)?;
    length
        .write_json(out_dir.join("length_report.json"))
        .map_err(io)?;
    subset
        .write_csv(out_dir.join("subset_report.csv"))
        .map_err(io)?;
    subset
        .write_json(out_dir.join("subset_report.json"))
        .map_err(io)?;
    Ok(())
}

fn select(
    cfg: &PipelineConfig,
    scores: &Path,
    manifest: &Path,
    out_dir: &Path,
    edge_args: &EdgeArgs,
) -> Result<(), Failure> {
    let budget = cfg
        .budget
        .ok_or_else(|| Failure::usage("a budget is required: --top-k N or --top-p F"))?;
    let corpus = read_manifest(manifest).map_err(|e| Failure::invalid(e.to_string()))?;
    let entries = read_scores(scores)
        .map_err(context(scores.display()))?
        .collect::<Result<Vec<ScoreEntry>, _>>()
        .map_err(|e| Failure::invalid(format!("{}: {e}", scores.display())))?;
    let hash = common_hash(entries.iter().map(ScoreEntry::config_hash), scores)?;
    if let Some(e) = entries.iter().find(|e| corpus.get(e.sample_id()).is_none()) {
        return Err(Failure::invalid(format!(
            "sample {:?} in {} has no entry in {}",
            e.sample_id(),
            scores.display(),
            manifest.display()
        )));
    }

    let n = entries.len();
    let mut failed = Vec::new();
    let candidates = entries.into_iter().filter_map(|e| match e {
        ScoreEntry::Scored(l) => {
            let source = if l.source.is_empty() {
                corpus
                    .get(&l.sample_id)
                    .map(|m| m.source.clone())
                    .unwrap_or_default()
            } else {
                l.source
            };
            Some(Candidate {
                sample_id: l.sample_id,
                score: l.score.unwrap_or(f64::NEG_INFINITY),
                source,
            })
        }
        ScoreEntry::Error {
            sample_id, error, ..
        } => {
            failed.push(Exclusion {
                sample_id,
                reason: format!("error: {error}"),
            });
            None
        }
    });
    let mut selection = select_top(candidates, budget, n);
    selection.excluded.extend(failed);
    selection
        .excluded
        .sort_by(|a, b| a.sample_id.cmp(&b.sample_id));

    fs::create_dir_all(out_dir).map_err(context(out_dir.display()))?;
    write_selection(out_dir.join("selection.jsonl"), &selection, hash.as_deref())
        .map_err(|e| Failure::general(e.to_string()))?;

    #[derive(Serialize)]
    struct Meta<'a> {
        config_hash: Option<&'a str>,
        budget: Budget,
        corpus_size: usize,
        requested: usize,
        selected: usize,
        excluded: &'a [Exclusion],
    }
    write_json(
        &out_dir.join("selection_meta.json"),
        &Meta {
            config_hash: hash.as_deref(),
            budget,
            corpus_size: n,
            requested: selection.requested,
            selected: selection.selected.len(),
            excluded: &selection.excluded,
        },
    )?;
    write_reports(
        out_dir,
        &selection.selected,
        &corpus,
        &edges(edge_args),
        hash.as_deref(),
    )?;
    eprintln!(
        "selected {} of {} candidates (budget {}, {} excluded) into {}",
        selection.selected.len(),
        n,
        selection.requested,
        selection.excluded.len(),
        out_dir.display()
    );
    Ok(())
}

fn report(
    selection: &Path,
    manifest: &Path,
    out_dir: &Path,
    edge_args: &EdgeArgs,
) -> Result<(), Failure> {
    let corpus = read_manifest(manifest).map_err(|e| Failure::invalid(e.to_string()))?;
    let selected = read_selection(selection)
        .map_err(|e| Failure::invalid(format!("{}: {e}", selection.display())))?;
    let hash = common_hash(selected.iter().map(|s| s.config_hash.as_deref()), selection)?;
    fs::create_dir_all(out_dir).map_err(context(out_dir.display()))?;
    write_reports(
        out_dir,
        &selected,
        &corpus,
        &edges(edge_args),
        hash.as_deref(),
    )
}

fn inspect(
    cfg: &PipelineConfig,
    validation: &Path,
    sample: Option<&str>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    #[derive(Serialize)]
    struct Line<'a> {
        sample_id: &'a str,
        position: usize,
        token_class: u32,
        role: &'static str,
        #[serde(rename = "Q")]
        q: f64,
        #[serde(rename = "K")]
        k: f64,
        alpha: f64,
    }
    let (_, records) = read_validation_file(validation)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(context(p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut found = false;
    for r in records
        .iter()
        .filter(|r| sample.is_none_or(|s| s == r.sample_id))
    {
        found = true;
        let map = aggregated_saliency(r, &cfg.saliency)
            .map_err(|e| Failure::invalid(format!("{}: {e}", r.sample_id)))?;
        for i in 0..r.len() {
            let line = Line {
                sample_id: &r.sample_id,
                position: i,
                token_class: r.token_ids[i].0,
                role: match r.roles[i] {
                    trim_core::Role::Special => "special",
                    trim_core::Role::Prompt => "prompt",
                    trim_core::Role::Response => "response",
                },
                q: map.q[i],
                k: map.k[i],
                alpha: map.alpha[i],
            };
            serde_json::to_writer(&mut sink, &line).map_err(io::Error::from)?;
            sink.write_all(b"\n")?;
        }
    }
    sink.flush()?;
    if let Some(s) = sample.filter(|_| !found) {
        return Err(Failure::invalid(format!(
            "no sample {s:?} in {}",
            validation.display()
        )));
    }
    Ok(())
}

fn synth(args: &SynthArgs) -> Result<(), Failure> {
    if args.shards == 0
        || args.min_len == 0
        || args.min_len > args.max_len
        || args.task_vocab > args.vocab
    {
        return Err(Failure::usage(
            "need --shards >= 1, 1 <= --min-len <= --max-len and --task-vocab <= --vocab",
        ));
    }
    let dtype = match args.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F16 => Dtype::F16,
    };
    let spec = SynthSpec {
        seed: args.seed,
        vocab: args.vocab,
        task_vocab: args.task_vocab,
        dim: args.dim,
        embedding_dim: args.dim,
        layers: args.layers,
        heads: args.heads,
        validation_samples: args.validation,
        candidates: args.candidates,
        candidate_len: (args.min_len, args.max_len),
        dtype,
        ..SynthSpec::default()
    };
    let dir = &args.out_dir;
    fs::create_dir_all(dir).map_err(context(dir.display()))?;

    // Validation and embeddings come from a candidate-free copy of the synth settings.
    let small = generate(&SynthSpec {
        candidates: 0,
        ..spec.clone()
    });
    let mut w = ValidationWriter::create(
        dir.join("validation.trmv"),
        ValidationHeader {
            dtype,
            dim: spec.dim,
            layers: spec.layers,
            heads: spec.heads,
        },
    )?;
    for r in &small.validation {
        w.write(r)?;
    }
    w.finish()?;
    write_embedding_file(dir.join("embeddings.trme"), &small.embeddings, dtype)?;

    let header = CandidateHeader {
        dtype,
        dim: spec.dim,
    };
    let per_shard = spec.candidates.div_ceil(args.shards).max(1);
    let mut entries = Vec::with_capacity(spec.candidates);
    let mut writer: Option<CandidateWriter> = None;
    for (i, (rec, entry)) in candidate_stream(&spec).enumerate() {
        if i % per_shard == 0 {
            if let Some(w) = writer.take() {
                w.finish()?;
            }
            let name = if args.shards == 1 {
                "candidates.trmc".to_string()
            } else {
                format!("candidates-{:03}.trmc", i / per_shard)
            };
            writer = Some(CandidateWriter::create(dir.join(name), header)?);
        }
        writer.as_mut().expect("writer opened above").write(&rec)?;
        entries.push(entry);
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    let manifest =
        CorpusManifest::from_entries(entries).map_err(|e| Failure::general(e.to_string()))?;
    write_manifest(dir.join("manifest.jsonl"), &manifest)
        .map_err(|e| Failure::general(e.to_string()))?;
    eprintln!(
        "wrote {} validation and {} candidate records to {}",
        small.validation.len(),
        manifest.len(),
        dir.display()
    );
    Ok(())
}
