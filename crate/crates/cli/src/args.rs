use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trim_core::{Budget, OovPolicy, PipelineConfig, ScoringScope};

#[derive(Debug, Parser)]
#[command(
    name = "trim",
    version,
    about = "Forward-only coreset selection from attention-weighted token fingerprints"
)]
pub struct Cli {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check record, embedding and fingerprint files for structural problems.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Hidden or embedding width every file must have.
        #[arg(long)]
        dim: Option<usize>,
        /// Print the reports as JSON lines instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Build the fingerprint dictionary from a validation record file.
    Fingerprint {
        validation: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Score candidate record files against a fingerprint dictionary.
    Score {
        #[arg(required = true)]
        candidates: Vec<PathBuf>,
        #[arg(short, long)]
        fingerprints: PathBuf,
        /// Input-embedding table, needed to back off unfingerprinted classes.
        #[arg(short, long)]
        embeddings: Option<PathBuf>,
        /// Corpus manifest; attaches source tags to the scores.
        #[arg(short, long)]
        manifest: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Select the coreset from a score file and write the reports.
    Select {
        scores: PathBuf,
        #[arg(short, long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        edges: EdgeArgs,
    },
    /// Rebuild the length and subset reports for an existing selection.
    Report {
        selection: PathBuf,
        #[arg(short, long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        edges: EdgeArgs,
    },
    /// Dump per-token saliency of a validation file as JSON lines.
    Inspect {
        validation: PathBuf,
        /// Only this sample.
        #[arg(long)]
        sample: Option<String>,
        /// Output file; stdout when absent.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write a seeded synthetic corpus: validation, candidates, embeddings, manifest.
    Synth(SynthArgs),
    /// Print the effective configuration and its hash.
    Config,
}

#[derive(Debug, Args)]
pub struct EdgeArgs {
    /// Lower bounds of the length buckets, starting at 0.
    #[arg(long, value_delimiter = ',')]
    pub edges: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScopeArg {
    All,
    Prompt,
    Response,
}

impl From<ScopeArg> for ScoringScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::All => ScoringScope::All,
            ScopeArg::Prompt => ScoringScope::PromptOnly,
            ScopeArg::Response => ScoringScope::ResponseOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OovArg {
    Backoff,
    Skip,
}

impl From<OovArg> for OovPolicy {
    fn from(o: OovArg) -> Self {
        match o {
            OovArg::Backoff => OovPolicy::Backoff,
            OovArg::Skip => OovPolicy::Skip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F16,
}

/// Pipeline settings. Flags override the config file, which overrides the
/// built-in defaults.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Final layers aggregated for row saliency.
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Row-saliency weight; the column weight becomes 1 - wq unless --wk is given.
    #[arg(long, global = true)]
    pub wq: Option<f64>,
    #[arg(long, global = true)]
    pub wk: Option<f64>,
    /// Mean weight in pooling; the max weight becomes 1 - wmu unless --wm is given.
    #[arg(long, global = true)]
    pub wmu: Option<f64>,
    #[arg(long, global = true)]
    pub wm: Option<f64>,
    /// Coverage bonus weight.
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// Penalty on backed-off token scores.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub scope: Option<ScopeArg>,
    #[arg(long, global = true, value_enum)]
    pub oov: Option<OovArg>,
    /// Scoring threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, conflicts_with = "top_p")]
    pub top_k: Option<usize>,
    /// Budget as a fraction of the corpus, rounded up.
    #[arg(long, global = true)]
    pub top_p: Option<f64>,
    /// Abort on the first per-record error.
    #[arg(long, global = true)]
    pub strict: bool,
}

fn pair(a: Option<f64>, b: Option<f64>, cur: (f64, f64)) -> (f64, f64) {
    match (a, b) {
        (Some(a), Some(b)) => (a, b),
        (Some(a), None) => (a, 1.0 - a),
        (None, Some(b)) => (1.0 - b, b),
        (None, None) => cur,
    }
}

impl ConfigArgs {
    /// Applies the flags on top of `base`.
    pub fn apply(&self, mut base: PipelineConfig) -> PipelineConfig {
        if let Some(l) = self.layers {
            base.saliency.layers = l;
        }
        (base.saliency.w_q, base.saliency.w_k) =
            pair(self.wq, self.wk, (base.saliency.w_q, base.saliency.w_k));
        (base.scoring.w_mu, base.scoring.w_m) =
            pair(self.wmu, self.wm, (base.scoring.w_mu, base.scoring.w_m));
        if let Some(e) = self.eta {
            base.scoring.eta = e;
        }
        if let Some(l) = self.lambda {
            base.scoring.lambda = l;
        }
        if let Some(s) = self.scope {
            base.scoring.scope = s.into();
        }
        if let Some(o) = self.oov {
            base.scoring.oov_policy = o.into();
        }
        if let Some(k) = self.top_k {
            base.budget = Some(Budget::TopK(k));
        }
        if let Some(p) = self.top_p {
            base.budget = Some(Budget::TopP(p));
        }
        base
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub validation: usize,
    #[arg(long, default_value_t = 200)]
    pub candidates: usize,
    /// Split the candidates over this many files.
    #[arg(long, default_value_t = 1)]
    pub shards: usize,
    #[arg(long, default_value_t = 64)]
    pub vocab: u32,
    #[arg(long, default_value_t = 24)]
    pub task_vocab: u32,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long = "synth-layers", default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 32)]
    pub max_len: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
}
