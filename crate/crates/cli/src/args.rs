//! Command-line surface. Every subcommand reads and writes files; nothing is
//! interactive. Randomized subcommands take `--seed` and are bit-reproducible
//! given it.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "attrpipe",
    version,
    about = "Content attribute pipeline: annotate, evaluate, distill, retrieve, simulate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a corpus file, validate it, and write the canonical form.
    Ingest(IngestArgs),
    /// Schedule prioritized batches and annotate them with a backend.
    Annotate(AnnotateArgs),
    /// Score annotations against a golden set.
    Evaluate(EvaluateArgs),
    /// Inter-rater reliability over golden-set rater labels.
    Irr(IrrArgs),
    /// Majority-merge per-rater labels into golden truths.
    MergeRaters(MergeRatersArgs),
    /// Train a student model on silver examples.
    Distill(DistillArgs),
    /// Bulk-score a corpus with a trained student model.
    Score(ScoreArgs),
    /// Vector index operations.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Attribute-restricted personalized retrieval for one user.
    Retrieve(RetrieveArgs),
    /// Offline A/B replay on a synthetic world.
    Simulate(SimulateArgs),
    /// Full pipeline run emitting one consolidated report.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Pipeline config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus file to load; defaults to corpus.path from the config.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Canonical corpus output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip and report bad lines instead of failing the ingest.
    #[arg(long)]
    pub lenient: bool,
    /// Also write `<base>.bin` and `<base>.manifest.json` embedding sidecars.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Attribute name; the highest version in the attributes file is used.
    #[arg(long)]
    pub attribute: String,
    /// Override backend.kind from the config.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Remote backend URL; overrides backend.endpoint.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Maximum number of videos to annotate.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Scheduling weights as `w_new,w_trending,w_impact`.
    #[arg(long, value_parser = parse_weights)]
    pub priority_weights: Option<Weights>,
    /// Seed for the synthetic backend's attribute direction.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Annotations output (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Run report output (JSON).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Also join annotations with embeddings into silver examples (JSONL).
    #[arg(long)]
    pub silver_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, Copy)]
pub struct Weights {
    pub w_new: f64,
    pub w_trending: f64,
    pub w_impact: f64,
}

fn parse_weights(raw: &str) -> Result<Weights, String> {
    let parts: Vec<&str> = raw.split(',').collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected w_new,w_trending,w_impact, got {} value(s)",
            parts.len()
        ));
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| format!("'{s}' is not a number"))
    };
    Ok(Weights {
        w_new: parse(parts[0])?,
        w_trending: parse(parts[1])?,
        w_impact: parse(parts[2])?,
    })
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Golden set (JSONL: item_id, truth, optional rater_labels).
    #[arg(long)]
    pub golden: PathBuf,
    /// Annotations to score (JSONL).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Score cutoff for the positive label.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Evaluate at several thresholds instead: comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub sweep: Option<Vec<f64>>,
    /// Report output (JSON); the report is also printed to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct IrrArgs {
    #[arg(long)]
    pub golden: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MergeRatersArgs {
    #[arg(long)]
    pub golden: PathBuf,
    /// Merged golden set output (JSONL). Tied items are excluded.
    #[arg(long)]
    pub out: PathBuf,
    /// Write tied item ids here (JSON array).
    #[arg(long)]
    pub ties: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub attribute: String,
    /// Silver examples (JSONL: embedding, teacher_score, teacher_label).
    #[arg(long)]
    pub silver: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trained model output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Training log output (JSON).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Trained model (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Corpus to score; defaults to corpus.path from the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Annotations output (JSONL).
    #[arg(long)]
    pub out: PathBuf,
    /// Timestamp stamped on every annotation.
    #[arg(long, default_value_t = 0)]
    pub clock: i64,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Build a clustered index and write its manifest.
    Build(IndexBuildArgs),
    /// Build an attribute vocabulary from stored annotations.
    Vocab(IndexVocabArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Corpus to index; defaults to corpus.path from the config.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of clusters; defaults to index.clusters from the config.
    #[arg(long)]
    pub clusters: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Index manifest output (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexVocabArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub attribute: String,
    /// Annotations to load into the store (JSONL).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Which annotation sources may certify membership.
    #[arg(long, value_enum, default_value_t = PolicyArg::TeacherPrecedence)]
    pub policy: PolicyArg,
    /// Membership cutoff; defaults to the attribute's decision threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Vocabulary output (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    TeacherOnly,
    StudentOnly,
    TeacherPrecedence,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Watch history (JSONL: video_id, watched_at).
    #[arg(long)]
    pub user_history: PathBuf,
    /// Vocabulary file(s) (JSON), comma-separated or repeated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub vocab: Vec<PathBuf>,
    /// Slate size.
    #[arg(long)]
    pub k: usize,
    /// Probe this many clusters instead of exact search.
    #[arg(long)]
    pub probes: Option<usize>,
    /// Affinity threshold; overrides gating.tau.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Reserved slots per triggered attribute; overrides gating.quota.
    #[arg(long)]
    pub quota: Option<usize>,
    #[arg(long, default_value = "user")]
    pub user_id: String,
    /// Slate output (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// World seed; overrides seeds.world.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replay report output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-session rows for external plotting (CSV).
    #[arg(long)]
    pub emit_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// World seed; overrides seeds.world.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Consolidated report output (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Invert teacher scores before training, to exercise the fidelity gate.
    #[arg(long)]
    pub corrupt_silver: bool,
}
