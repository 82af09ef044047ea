mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::LazyLock;

use clap::{Args, Parser, Subcommand, ValueEnum};

use zpe::diagnostics::FrequencyScale;
use zpe::prompt::POOL_DATA_VERSION;
use zpe::scoring::NormalizationMode;
use zpe::weighting::{WeightingScheme, DEFAULT_POWER, DEFAULT_TEMPERATURE};

static VERSION: LazyLock<String> = LazyLock::new(|| {
    format!(
        "{} (pool data {POOL_DATA_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
});

/// Zero-shot prompt scoring and weighted prompt ensembles over precomputed embeddings.
#[derive(Debug, Parser)]
#[command(name = "zpe", version = VERSION.as_str())]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compose every template with every class name.
    Compose(ComposeArgs),
    /// Score prompts by (normalized) max logit.
    Score(ScoreArgs),
    /// Select prompts by MAD z-score of their scores.
    Select(SelectArgs),
    /// Ensemble per-prompt logits and predict classes.
    Predict(PredictArgs),
    /// Accuracy of predictions against labels.
    Eval(EvalArgs),
    /// Accuracy over a grid of normalization, weighting and selection settings.
    Ablate(AblateArgs),
    /// Correlate word frequency with mean image-word logits.
    DiagnoseBias(DiagnoseBiasArgs),
    /// Write a synthetic fixture with a planted biased prompt.
    Synth(SynthArgs),
    /// Ranked listing of the best and worst prompts.
    Report(ReportArgs),
}

/// Test-set logits, either from embeddings or precomputed.
#[derive(Debug, Args)]
struct LogitsInput {
    /// N×D unit-norm image embeddings (ZPT).
    #[arg(
        long,
        requires = "class_emb",
        conflicts_with = "logits",
        required_unless_present = "logits"
    )]
    images: Option<PathBuf>,
    /// P×C×D unit-norm class embeddings (ZPT).
    #[arg(long)]
    class_emb: Option<PathBuf>,
    /// Precomputed P×N×C logits cube (ZPT).
    #[arg(long)]
    logits: Option<PathBuf>,
}

/// Pretrain reference, either embeddings (needs --class-emb) or a logits cube.
#[derive(Debug, Args)]
struct PretrainInput {
    /// N′×D unit-norm pretrain image embeddings (ZPT).
    #[arg(long, conflicts_with = "pretrain_logits")]
    pretrain: Option<PathBuf>,
    /// Precomputed P×N′×C pretrain logits cube (ZPT).
    #[arg(long)]
    pretrain_logits: Option<PathBuf>,
    /// Use at most this many leading pretrain rows.
    #[arg(long, default_value_t = 20000)]
    pretrain_cap: usize,
}

#[derive(Debug, Args)]
struct ComposeArgs {
    /// Pool manifest JSON, or a builtin pool name (pool247, pool426).
    #[arg(long)]
    pool: String,
    /// Class manifest JSON.
    #[arg(long)]
    classes: PathBuf,
    /// Output JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    input: LogitsInput,
    #[command(flatten)]
    pretrain: PretrainInput,
    /// Expected-logit reference subtracted before the max.
    #[arg(long, default_value = "both")]
    norm: NormalizationMode,
    /// Keep one score per (prompt, image) instead of averaging over images.
    #[arg(long)]
    per_example: bool,
    /// Output score JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// Score JSON.
    #[arg(long)]
    scores: PathBuf,
    /// Keep prompts with z-score above this; 0.5 suits general datasets, 2.0 fine-grained ones.
    #[arg(long)]
    tau: f64,
    /// Output selection JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum WeightingArg {
    Raw,
    Power,
    Softmax,
}

#[derive(Debug, Args)]
struct WeightingArgs {
    /// How scores become weights.
    #[arg(long, value_enum, default_value_t = WeightingArg::Softmax)]
    weighting: WeightingArg,
    /// Exponent for power weighting.
    #[arg(long, default_value_t = DEFAULT_POWER)]
    power_exp: u32,
    /// Temperature for softmax weighting.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

fn scheme(kind: WeightingArg, power_exp: u32, temperature: f64) -> WeightingScheme {
    match kind {
        WeightingArg::Raw => WeightingScheme::Raw,
        WeightingArg::Power => WeightingScheme::Power {
            exponent: power_exp,
        },
        WeightingArg::Softmax => WeightingScheme::Softmax { temperature },
    }
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    input: LogitsInput,
    /// Score JSON; without it every prompt gets weight 1.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Selection JSON restricting the ensemble to selected prompts.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[command(flatten)]
    weighting: WeightingArgs,
    /// Output predictions, N u32 class indices (ZPT).
    #[arg(long)]
    out: PathBuf,
    /// Also write the N×C ensembled logits (ZPT, f32).
    #[arg(long)]
    logits_out: Option<PathBuf>,
    /// Labels (ZPT u32) to evaluate against.
    #[arg(long, requires = "report")]
    labels: Option<PathBuf>,
    /// Where to write the evaluation report JSON.
    #[arg(long, requires = "labels")]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Predictions (ZPT u32).
    #[arg(long)]
    predictions: PathBuf,
    /// Labels (ZPT u32).
    #[arg(long)]
    labels: PathBuf,
    /// Number of classes, for label range checks (default: 1 + largest index seen).
    #[arg(long)]
    classes: Option<usize>,
    /// Output report JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A selection threshold, or `none` for no selection.
#[derive(Debug, Clone, Copy, PartialEq)]
struct TauArg(Option<f64>);

fn parse_tau(s: &str) -> Result<TauArg, String> {
    if s == "none" {
        return Ok(TauArg(None));
    }
    match s.parse::<f64>() {
        Ok(t) if t.is_finite() => Ok(TauArg(Some(t))),
        _ => Err(format!("expected a number or `none`, got {s:?}")),
    }
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[command(flatten)]
    input: LogitsInput,
    #[command(flatten)]
    pretrain: PretrainInput,
    /// Labels (ZPT u32).
    #[arg(long)]
    labels: PathBuf,
    /// Normalization modes (default: all five with a pretrain reference, else none,test).
    #[arg(long, value_delimiter = ',')]
    norms: Vec<NormalizationMode>,
    /// Weighting schemes.
    #[arg(
        long,
        value_enum,
        value_delimiter = ',',
        default_value = "raw,power,softmax"
    )]
    weightings: Vec<WeightingArg>,
    #[command(flatten)]
    weighting: AblateWeightingArgs,
    /// Selection thresholds; `none` disables selection.
    #[arg(long, value_delimiter = ',', value_parser = parse_tau, default_value = "none,0.5,2.0")]
    taus: Vec<TauArg>,
    /// Also run every configuration with per-example weights.
    #[arg(long)]
    per_example: bool,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateWeightingArgs {
    /// Exponent for power weighting.
    #[arg(long, default_value_t = DEFAULT_POWER)]
    power_exp: u32,
    /// Temperature for softmax weighting.
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CountsArg {
    Raw,
    Log,
}

impl From<CountsArg> for FrequencyScale {
    fn from(c: CountsArg) -> Self {
        match c {
            CountsArg::Raw => FrequencyScale::Raw,
            CountsArg::Log => FrequencyScale::Log,
        }
    }
}

#[derive(Debug, Args)]
struct DiagnoseBiasArgs {
    /// `word,count` CSV with a header row.
    #[arg(long)]
    freq: PathBuf,
    /// Whether the count column holds raw counts or log-counts.
    #[arg(long, value_enum, default_value_t = CountsArg::Raw)]
    counts: CountsArg,
    /// W×D unit-norm word embeddings, one row per CSV row (ZPT).
    #[arg(long)]
    word_emb: PathBuf,
    /// N×D unit-norm image embeddings (ZPT).
    #[arg(long)]
    images: PathBuf,
    /// N′×D unit-norm pretrain image embeddings (ZPT).
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Use at most this many leading pretrain rows.
    #[arg(long, default_value_t = 20000)]
    pretrain_cap: usize,
    /// Output report JSON (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prompts.
    #[arg(long, default_value_t = 8)]
    p: usize,
    /// Test images.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// Classes.
    #[arg(long, default_value_t = 4)]
    c: usize,
    /// Embedding dimension (at least 3).
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Pretrain images.
    #[arg(long, default_value_t = 64)]
    n_pretrain: usize,
    /// Number of planted biased prompts (the last indices).
    #[arg(long, default_value_t = 1)]
    biased: usize,
    /// Bias component shared by all images.
    #[arg(long, default_value_t = 0.3)]
    offset: f64,
    /// Class anchor weight relative to unit image noise.
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    /// Also write a word-frequency fixture with this many words.
    #[arg(long, default_value_t = 0)]
    words: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Pool manifest JSON, or a builtin pool name (pool247, pool426).
    #[arg(long)]
    pool: String,
    /// Score JSON.
    #[arg(long)]
    scores: PathBuf,
    /// Entries in each of the top and bottom lists.
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Also write the listing as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the text listing here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Raised for bad flag values caught after parsing; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {message}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
