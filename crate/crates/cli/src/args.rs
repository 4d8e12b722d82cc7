use clap::{Args, Parser, Subcommand, ValueEnum};
use macrid::corpus::SplitPart;
use macrid::model::{NegSamples, Similarity};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "macrid", version, about = "Disentangled VAE recommender")]
pub struct Cli {
    /// Seed for splits, initialisation and training noise.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Only print warnings and errors on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Machine-readable output: JSON on stdout, or written to FILE.
    #[arg(long, global = true, value_name = "FILE", num_args = 0..=1, require_equals = true)]
    pub json: Option<Option<PathBuf>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter a rating log into a binary corpus and a fold-in split.
    Prep(PrepArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Random hyper-parameter search.
    Search(SearchArgs),
    /// Ranking metrics of a checkpoint on a held-out split.
    Eval(EvalArgs),
    /// Grid of trainings reporting NDCG@100 and the independence score.
    Sweep(SweepArgs),
    /// Monotone trajectory along one dimension.
    Control(ControlArgs),
    /// Item and user representations as TSV.
    Export(ExportArgs),
    /// JSON-over-HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Minimum rating counted as an interaction.
    #[arg(long, default_value_t = 4.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 5)]
    pub min_items: usize,
    /// Users held out, split evenly between validation and test.
    #[arg(long, default_value_t = 100)]
    pub heldout: usize,
    #[arg(long, default_value_t = 0.8)]
    pub foldin: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SimilarityArg {
    Cosine,
    Inner,
}

impl From<SimilarityArg> for Similarity {
    fn from(s: SimilarityArg) -> Self {
        match s {
            SimilarityArg::Cosine => Similarity::Cosine,
            SimilarityArg::Inner => Similarity::Inner,
        }
    }
}

/// Model and optimisation flags; unset flags come from `--config` or the
/// defaults.
#[derive(Clone, Debug, Default, Args)]
pub struct ModelArgs {
    /// TrainConfig JSON providing defaults for the flags below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma0: Option<f64>,
    /// Temperature of the prototype similarities.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Gumbel-Softmax temperature.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// `full`, `auto` or a number of sampled negatives.
    #[arg(long)]
    pub neg_samples: Option<NegSamples>,
    #[arg(long, value_enum)]
    pub similarity: Option<SimilarityArg>,
    /// `off` or a JS-divergence threshold.
    #[arg(long, value_parser = parse_adaptive)]
    pub adaptive_k: Option<AdaptiveK>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveK(pub Option<f64>);

fn parse_adaptive(s: &str) -> Result<AdaptiveK, String> {
    if s == "off" {
        return Ok(AdaptiveK(None));
    }
    s.parse::<f64>()
        .ok()
        .filter(|t| *t > 0.0)
        .map(|t| AdaptiveK(Some(t)))
        .ok_or_else(|| format!("expected off or a positive threshold, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub trials: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Checkpoint of the winning configuration.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the winning TrainConfig.
    #[arg(long)]
    pub save_config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Validation,
    Test,
}

impl From<SplitArg> for SplitPart {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Validation => SplitPart::Validation,
            SplitArg::Test => SplitPart::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// `name=v1,v2,…` per swept flag, e.g. `beta=0,1,10,50 sigma0=0.1,0.2`.
    #[arg(long, num_args = 1.., required = true)]
    pub grid: Vec<String>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Representations entering the independence score: `all` for the
    /// concatenated means, or one concept index.
    #[arg(long, default_value = "all", value_parser = parse_scope)]
    pub scope: Scope,
    /// CSV of (config, NDCG@100, independence) rows.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scope(pub Option<usize>);

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            None => write!(f, "all"),
            Some(k) => write!(f, "{k}"),
        }
    }
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    if s == "all" {
        return Ok(Scope(None));
    }
    s.parse()
        .map(|k| Scope(Some(k)))
        .map_err(|_| format!("expected all or a concept index, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct ControlArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Anchor item id.
    #[arg(long, conflicts_with = "user", required_unless_present = "user")]
    pub item: Option<String>,
    /// Anchor user id; the anchor is component `--k` of the user's posterior mean.
    #[arg(long, requires_all = ["k", "corpus"])]
    pub user: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Corpus directory with the user's items.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub b: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 8)]
    pub beam: usize,
    /// Similarity temperature; the model's τ when absent.
    #[arg(long)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus directory; users are exported when given.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 7700)]
    pub port: u16,
}
