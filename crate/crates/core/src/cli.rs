//! The `verba` command line: one subcommand per pipeline stage.
//!
//! Every subcommand reads its inputs from files, writes its artifacts to
//! files, and records the effective configuration next to its main output
//! as `<output>.config.json` (echoed to standard error as well). Parameters
//! are layered: built-in defaults, then a flat `key=value` file passed with
//! `--config`, then command-line flags.
//!
//! Exit status is 0 on success, 2 for usage errors (unknown flag, bad
//! configuration, missing input file) and 1 for runtime failures. Errors are
//! reported as a single line `verba: <kind>: <message>`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{self, MaskingConfig, ReferenceVocab};
use crate::datasets::{self, SenseExample, SenseMiningConfig};
use crate::encoder::{self, EncoderState, TrainConfig, TransformerConfig};
use crate::heads::{self, FineTuneConfig, Pooling, PosModel, WsdModel};
use crate::infill::{self, CandidateRanking};
use crate::neighbors::{self, EmbeddingIndex, IndexConfig, RecordKey, SentenceStore};
use crate::subword::{self, LearnConfig, SubwordVocab};
use crate::textproc::{self, ExceptionList, RawDocument, Sentence, Source, Tokenizer};
use crate::{jsonl, Error};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "verba", version, about = "Latin language-model pipeline")]
struct Cli {
    /// Flat key=value file of flag defaults; command-line flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split raw text into sentences and tokens, detaching enclitics.
    #[command(args_override_self = true)]
    Tokenize(TokenizeArgs),
    /// Learn a WordPiece vocabulary from a tokenized corpus.
    #[command(args_override_self = true)]
    LearnVocab(LearnVocabArgs),
    /// Encode tokenized sentences as subword ids.
    #[command(args_override_self = true)]
    Encode(EncodeArgs),
    /// Drop documents whose in-vocabulary word share is below a threshold.
    #[command(args_override_self = true)]
    QualityFilter(QualityFilterArgs),
    /// Compute per-source upsampling weights for a target archive share.
    #[command(args_override_self = true)]
    PlanMixture(PlanMixtureArgs),
    /// Generate whole-word-masked training examples.
    #[command(args_override_self = true)]
    MakeExamples(MakeExamplesArgs),
    /// Train the encoder on masked examples.
    #[command(args_override_self = true)]
    Pretrain(PretrainArgs),
    /// Compare analytic gradients with central finite differences.
    #[command(args_override_self = true)]
    GradCheck(GradCheckArgs),
    /// Fine-tune a part-of-speech tagger on a treebank.
    #[command(args_override_self = true)]
    TagTrain(TagTrainArgs),
    /// Score a tagger on a treebank.
    #[command(args_override_self = true)]
    TagEval(TagEvalArgs),
    /// Build balanced sense datasets from dictionary citations.
    #[command(args_override_self = true)]
    WsdMine(WsdMineArgs),
    /// Fine-tune one sense classifier per headword.
    #[command(args_override_self = true)]
    WsdTrain(WsdTrainArgs),
    /// Score sense classifiers on the test split.
    #[command(args_override_self = true)]
    WsdEval(WsdEvalArgs),
    /// Extract single-word bracketed emendations from critical texts.
    #[command(args_override_self = true)]
    MineEmendations(MineEmendationsArgs),
    /// Rank candidate words for each emendation slot.
    #[command(args_override_self = true)]
    InfillRank(InfillRankArgs),
    /// Top-k accuracy and MRR of candidate rankings.
    #[command(args_override_self = true)]
    InfillEval(InfillEvalArgs),
    /// Index the contextual vector of every word in a corpus.
    #[command(args_override_self = true)]
    IndexBuild(IndexBuildArgs),
    /// Find the nearest corpus tokens to a word in context.
    #[command(args_override_self = true)]
    IndexQuery(IndexQueryArgs),
    /// Write the contextual vectors of one word form as CSV.
    #[command(args_override_self = true)]
    DumpEmbeddings(DumpEmbeddingsArgs),
}

#[derive(Args, Debug, Serialize)]
struct TokenizeArgs {
    /// Plain text file, or JSON-lines documents {id, source, text}.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write JSON-lines sentence records instead of token lines.
    #[arg(long)]
    jsonl: bool,
    /// Enclitic exception list replacing the bundled one.
    #[arg(long)]
    exceptions: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct LearnVocabArgs {
    /// Tokenized corpus: token lines or JSON-lines sentences.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = LearnConfig::default().target_size)]
    size: usize,
    #[arg(long, default_value_t = LearnConfig::default().min_frequency)]
    min_frequency: u64,
    /// Keep case distinctions.
    #[arg(long)]
    cased: bool,
}

#[derive(Args, Debug, Serialize)]
struct EncodeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Maximum sequence length including [CLS] and [SEP].
    #[arg(long, default_value_t = 128)]
    max_len: usize,
}

#[derive(Args, Debug, Serialize)]
struct QualityFilterArgs {
    /// JSON-lines documents.
    #[arg(long = "in")]
    input: PathBuf,
    /// Retained documents.
    #[arg(long)]
    out: PathBuf,
    /// Reference word list, one per line. Defaults to the words of the
    /// born-digital (non-archive) input documents.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = corpus::DEFAULT_QUALITY_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug, Serialize)]
struct PlanMixtureArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Plan as JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    target_ia_fraction: f64,
    /// Also write the upsampled document stream here.
    #[arg(long)]
    upsampled: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MakeExamplesArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = MaskingConfig::default().mask_prob)]
    mask_prob: f64,
    /// Masking passes over the corpus, each with fresh draws.
    #[arg(long, default_value_t = 1)]
    passes: u64,
    /// Allow sentences with no masked word.
    #[arg(long)]
    no_force_one: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ModelSize {
    Tiny,
    Desk,
    Full,
}

impl ModelSize {
    fn config(self, vocab_size: usize) -> TransformerConfig {
        match self {
            ModelSize::Tiny => TransformerConfig::tiny(vocab_size),
            ModelSize::Desk => TransformerConfig::desk(vocab_size),
            ModelSize::Full => TransformerConfig::full_scale(vocab_size),
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    examples: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    model_size: ModelSize,
    /// Override both dropout rates of a fresh model.
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = TrainConfig::default().warmup_fraction)]
    warmup_fraction: f64,
    /// Keep the learning rate constant after warmup.
    #[arg(long)]
    no_decay: bool,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    #[arg(long)]
    vocab: PathBuf,
    /// Masked examples; the first one is checked.
    #[arg(long)]
    examples: PathBuf,
    /// Report as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Check this model instead of a fresh one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tiny")]
    model_size: ModelSize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PoolingArg {
    Mean,
    First,
}

#[derive(Args, Debug, Serialize)]
struct FineTuneArgs {
    #[arg(long, default_value_t = FineTuneConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = FineTuneConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = FineTuneConfig::default().patience)]
    patience: usize,
    #[arg(long, default_value_t = FineTuneConfig::default().max_epochs)]
    max_epochs: usize,
    /// Epochs to run when there is no dev data.
    #[arg(long, default_value_t = FineTuneConfig::default().fixed_epochs)]
    fixed_epochs: usize,
    #[arg(long, value_enum, default_value = "mean")]
    pooling: PoolingArg,
    #[arg(long)]
    freeze_encoder: bool,
}

impl FineTuneArgs {
    fn config(&self, seed: u64) -> FineTuneConfig {
        FineTuneConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            patience: self.patience,
            max_epochs: self.max_epochs,
            fixed_epochs: self.fixed_epochs,
            pooling: match self.pooling {
                PoolingArg::Mean => Pooling::Mean,
                PoolingArg::First => Pooling::First,
            },
            freeze_encoder: self.freeze_encoder,
            seed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TagTrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Training treebank (10-column format).
    #[arg(long)]
    train: PathBuf,
    /// Development treebank for early stopping.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Tagger checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    tuning: FineTuneArgs,
}

#[derive(Args, Debug, Serialize)]
struct TagEvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Metrics as JSON.
    #[arg(long)]
    out: PathBuf,
    /// Also write `token TAB tag` predictions here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct WsdMineArgs {
    /// JSON-lines dictionary entries.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = SenseMiningConfig::default().min_per_sense)]
    min_per_sense: usize,
    #[arg(long, default_value_t = SenseMiningConfig::default().min_words)]
    min_words: usize,
    #[arg(long, default_value_t = SenseMiningConfig::default().dev_fraction)]
    dev_fraction: f64,
    #[arg(long, default_value_t = SenseMiningConfig::default().test_fraction)]
    test_fraction: f64,
}

#[derive(Args, Debug, Serialize)]
struct WsdTrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Mined sense examples.
    #[arg(long = "in")]
    input: PathBuf,
    /// Directory receiving one `<headword>.model` per headword.
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    tuning: FineTuneArgs,
}

#[derive(Args, Debug, Serialize)]
struct WsdEvalArgs {
    /// Directory of `.model` files.
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct MineEmendationsArgs {
    /// Critical texts: plain text or JSON-lines documents.
    #[arg(long = "in")]
    input: PathBuf,
    /// Tokenized pretraining corpus used for the leakage check.
    #[arg(long)]
    training: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InfillRankArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Emendation examples.
    #[arg(long = "in")]
    input: PathBuf,
    /// Tokenized corpus the candidate lexicon is drawn from.
    #[arg(long)]
    lexicon: PathBuf,
    #[arg(long, default_value_t = infill::DEFAULT_MIN_FREQUENCY)]
    min_frequency: u64,
    #[arg(long)]
    out: PathBuf,
    /// Candidates printed per example; 0 prints nothing.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args, Debug, Serialize)]
struct InfillEvalArgs {
    #[arg(long)]
    rankings: PathBuf,
    /// The emendation examples that were ranked, in the same order.
    #[arg(long)]
    examples: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct IndexBuildArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Raw text: plain text or JSON-lines documents.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Hidden layer to index; defaults to the last.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    include_punctuation: bool,
    #[arg(long, default_value_t = 1)]
    shards: usize,
    /// Tab-separated `doc_id TAB citation` lines.
    #[arg(long)]
    citations: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct IndexQueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Query sentence, tokenized on the fly.
    #[arg(long, conflicts_with = "doc")]
    text: Option<String>,
    /// Query a sentence of the corpus by document id...
    #[arg(long, requires = "corpus")]
    doc: Option<String>,
    /// ...and sentence index.
    #[arg(long, default_value_t = 0)]
    sentence: usize,
    /// Index of the query word among the sentence tokens.
    #[arg(long, conflicts_with = "form")]
    word: Option<usize>,
    /// Query the first token with this form instead.
    #[arg(long)]
    form: Option<String>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Raw corpus for snippets and corpus-sentence queries.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Leave the query token itself out of the results.
    #[arg(long)]
    exclude_self: bool,
    /// Hits as JSON-lines.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct DumpEmbeddingsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Raw text: plain text or JSON-lines documents.
    #[arg(long = "in")]
    input: PathBuf,
    /// Word form whose occurrences are dumped.
    #[arg(long)]
    form: String,
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Failed(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(Error::Config(_)) => EXIT_USAGE,
            CliError::Lib(Error::File { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Usage(m) => ("usage", m.clone()),
            CliError::Failed(m) => ("failed", m.clone()),
            CliError::Lib(e) => {
                let kind = match e {
                    Error::Config(_) => "config",
                    Error::Input(_) => "input",
                    Error::Parse { .. } => "parse",
                    Error::Format { .. } => "format",
                    Error::NonFiniteLoss { .. } => "training",
                    Error::File { .. } | Error::Io(_) => "io",
                    Error::Json(_) => "json",
                };
                (kind, e.to_string())
            }
        };
        let msg: Vec<&str> = msg.split_whitespace().collect();
        format!("verba: {kind}: {}", msg.join(" "))
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

/// Parse `args` (program name first), run the subcommand and return the
/// process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let result = parse(&args).and_then(|cli| dispatch(cli));
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) if m.is_empty() => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

/// Parse with config-file values inserted ahead of the user's flags, so
/// that later flags override them.
fn parse(args: &[OsString]) -> CliResult<Cli> {
    let strings: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let mut argv = args.to_vec();
    if let Some(path) = config_path(&strings) {
        let sub_pos = strings
            .iter()
            .skip(1)
            .position(|a| Cli::command().find_subcommand(a).is_some())
            .map(|p| p + 1)
            .ok_or_else(|| CliError::Usage("no subcommand given".into()))?;
        let injected = config_args(&path, &strings[sub_pos])?;
        argv.splice(sub_pos + 1..sub_pos + 1, injected.into_iter().map(OsString::from));
    }
    let matches = Cli::command().try_get_matches_from(argv).map_err(clap_error)?;
    Cli::from_arg_matches(&matches).map_err(clap_error)
}

fn clap_error(e: clap::Error) -> CliError {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            CliError::Usage(String::new())
        }
        _ => {
            // Keep the message on one line; missing argument names follow
            // the first line, the usage block and hints come after a blank.
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(str::trim)
                .collect();
            CliError::Usage(msg.join(" ").trim_start_matches("error: ").to_string())
        }
    }
}

fn config_path(args: &[String]) -> Option<PathBuf> {
    let mut it = args.iter().skip(1);
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parse a flat `key=value` file. Blank lines and `#` comments are skipped.
pub fn parse_config_file(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        out.insert(k.trim().replace('_', "-"), v.trim().to_string());
    }
    Ok(out)
}

fn config_args(path: &Path, sub: &str) -> CliResult<Vec<String>> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let entries = parse_config_file(&text).map_err(CliError::Usage)?;
    let mut root = Cli::command();
    root.build();
    let cmd = root.find_subcommand(sub).expect("subcommand located by caller");
    let mut out = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            return Err(CliError::Usage("config files cannot include other config files".into()));
        }
        let arg = cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key {key:?} for {sub}")))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value.as_str() {
                "true" => out.push(format!("--{key}")),
                "false" => {}
                _ => return Err(CliError::Usage(format!("config key {key} expects true or false"))),
            }
        } else {
            out.push(format!("--{key}={value}"));
        }
    }
    Ok(out)
}

fn dispatch(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match &cli.command {
        Command::Tokenize(a) => tokenize(a, seed),
        Command::LearnVocab(a) => learn_vocab(a, seed),
        Command::Encode(a) => encode(a, seed),
        Command::QualityFilter(a) => quality_filter(a, seed),
        Command::PlanMixture(a) => plan_mixture(a, seed),
        Command::MakeExamples(a) => make_examples(a, seed),
        Command::Pretrain(a) => pretrain(a, seed),
        Command::GradCheck(a) => grad_check(a, seed),
        Command::TagTrain(a) => tag_train(a, seed),
        Command::TagEval(a) => tag_eval(a, seed),
        Command::WsdMine(a) => wsd_mine(a, seed),
        Command::WsdTrain(a) => wsd_train(a, seed),
        Command::WsdEval(a) => wsd_eval(a, seed),
        Command::MineEmendations(a) => mine_emendations(a, seed),
        Command::InfillRank(a) => infill_rank(a, seed),
        Command::InfillEval(a) => infill_eval(a, seed),
        Command::IndexBuild(a) => index_build(a, seed),
        Command::IndexQuery(a) => index_query(a, seed),
        Command::DumpEmbeddings(a) => dump_embeddings(a, seed),
    }
}

// ---------------------------------------------------------------------------
// Plumbing

#[derive(Serialize)]
struct Effective<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    #[serde(flatten)]
    args: &'a A,
}

/// `<path>.<suffix>`, keeping the original extension.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn record_config<A: Serialize>(command: &str, seed: u64, args: &A, output: &Path) -> CliResult {
    let eff = Effective {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        args,
    };
    let json = serde_json::to_string_pretty(&eff).map_err(Error::from)?;
    eprintln!("{json}");
    write_text(&sibling(output, "config.json"), &(json + "\n"))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let json = serde_json::to_string_pretty(value).map_err(Error::from)?;
    write_text(path, &(json + "\n"))
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::file(path, e))?))
}

fn is_jsonl(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// JSON-lines documents, or a plain text file read as one document named
/// after the file.
fn read_documents(path: &Path) -> CliResult<Vec<RawDocument>> {
    if is_jsonl(path) {
        return Ok(jsonl::read(path)?);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    Ok(vec![RawDocument {
        id: stem(path),
        source: Source::Other,
        text,
    }])
}

/// JSON-lines sentence records, or token lines (one sentence per line,
/// document id taken from the file name, index counting non-empty lines).
fn read_sentences(path: &Path) -> CliResult<Vec<Sentence>> {
    if is_jsonl(path) {
        return Ok(jsonl::read(path)?);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let doc = stem(path);
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| Sentence::from_token_line(doc.clone(), i, l))
        .collect())
}

fn raw_sentences(path: &Path) -> CliResult<Vec<Sentence>> {
    Ok(read_documents(path)?.iter().flat_map(textproc::split_document).collect())
}

fn load_encoder(path: &Path, vocab: &SubwordVocab) -> CliResult<EncoderState> {
    let state = EncoderState::load(path)?;
    check_vocab(&state, vocab)?;
    Ok(state)
}

fn check_vocab(state: &EncoderState, vocab: &SubwordVocab) -> CliResult {
    if state.config().vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model expects {} vocabulary entries, vocabulary has {}",
            state.config().vocab_size,
            vocab.len()
        ))
        .into());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Subcommands

fn tokenize(a: &TokenizeArgs, seed: u64) -> CliResult {
    record_config("tokenize", seed, a, &a.out)?;
    let docs = read_documents(&a.input)?;
    let custom = match &a.exceptions {
        Some(p) => Some(ExceptionList::parse(&fs::read_to_string(p).map_err(|e| Error::file(p, e))?)),
        None => None,
    };
    let tokenizer = match &custom {
        Some(list) => Tokenizer::with_exceptions(list),
        None => Tokenizer::default(),
    };
    let sentences: Vec<Sentence> = docs
        .iter()
        .flat_map(|d| {
            textproc::segment_sentences(&d.text)
                .into_iter()
                .enumerate()
                .map(|(i, text)| Sentence {
                    doc_id: d.id.clone(),
                    index: i,
                    tokens: tokenizer.tokenize(&text),
                    text,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    if a.jsonl {
        jsonl::write(&a.out, &sentences)?;
    } else {
        let mut w = create(&a.out)?;
        for s in &sentences {
            writeln!(w, "{}", s.token_line()).map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
    }
    log::info!("{} sentences from {} documents", sentences.len(), docs.len());
    Ok(())
}

fn learn_vocab(a: &LearnVocabArgs, seed: u64) -> CliResult {
    record_config("learn-vocab", seed, a, &a.out)?;
    let sentences = read_sentences(&a.input)?;
    let counts = subword::word_counts(sentences.iter().flat_map(|s| s.tokens.iter().map(|t| t.surface.as_str())));
    let vocab = subword::learn_vocab(
        counts,
        &LearnConfig {
            target_size: a.size,
            min_frequency: a.min_frequency,
            lowercase: !a.cased,
        },
    )?;
    vocab.save(&a.out)?;
    log::info!("vocabulary of {} entries", vocab.len());
    Ok(())
}

#[derive(Serialize)]
struct EncodedSentence<'a> {
    doc_id: &'a str,
    index: usize,
    #[serde(flatten)]
    encoding: subword::SubwordEncoding,
}

fn encode(a: &EncodeArgs, seed: u64) -> CliResult {
    record_config("encode", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let sentences = read_sentences(&a.input)?;
    let records = sentences.iter().map(|s| EncodedSentence {
        doc_id: &s.doc_id,
        index: s.index,
        encoding: vocab.encode_sentence(&s.tokens, true, a.max_len),
    });
    jsonl::write(&a.out, records)?;
    Ok(())
}

fn quality_filter(a: &QualityFilterArgs, seed: u64) -> CliResult {
    record_config("quality-filter", seed, a, &a.out)?;
    let docs = read_documents(&a.input)?;
    let reference = match &a.reference {
        Some(p) => ReferenceVocab::load(p)?,
        None => ReferenceVocab::from_documents(docs.iter().filter(|d| d.source != Source::InternetArchive)),
    };
    let reports: Vec<_> = docs
        .iter()
        .map(|d| corpus::quality_filter(d, &reference, a.threshold))
        .collect();
    let kept = docs.iter().zip(&reports).filter(|(_, r)| r.retained).map(|(d, _)| d);
    jsonl::write(&a.out, kept)?;
    jsonl::write(sibling(&a.out, "report.jsonl"), &reports)?;
    log::info!(
        "kept {} of {} documents",
        reports.iter().filter(|r| r.retained).count(),
        reports.len()
    );
    Ok(())
}

fn plan_mixture(a: &PlanMixtureArgs, seed: u64) -> CliResult {
    record_config("plan-mixture", seed, a, &a.out)?;
    let docs = read_documents(&a.input)?;
    let counts = corpus::source_token_counts(&docs);
    let plan = corpus::plan_mixture(&counts, a.target_ia_fraction)?;
    write_json(&a.out, &plan)?;
    if let Some(out) = &a.upsampled {
        jsonl::write(out, corpus::upsample(&docs, &plan, seed))?;
    }
    Ok(())
}

fn make_examples(a: &MakeExamplesArgs, seed: u64) -> CliResult {
    record_config("make-examples", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let sentences = read_sentences(&a.input)?;
    let cfg = MaskingConfig {
        seq_len: a.seq_len,
        mask_prob: a.mask_prob,
        force_one: !a.no_force_one,
        seed,
    };
    let mut examples = Vec::new();
    for pass in 0..a.passes {
        examples.extend(corpus::make_masked_examples(&sentences, &vocab, &cfg, pass)?);
    }
    jsonl::write(&a.out, &examples)?;
    log::info!("{} examples", examples.len());
    Ok(())
}

fn pretrain(a: &PretrainArgs, seed: u64) -> CliResult {
    record_config("pretrain", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let examples: Vec<corpus::MaskedExample> = jsonl::read(&a.examples)?;
    let mut state = match &a.init {
        Some(p) => load_encoder(p, &vocab)?,
        None => {
            let mut cfg = a.model_size.config(vocab.len());
            cfg.seed = seed;
            if let Some(p) = a.dropout {
                cfg.hidden_dropout = p;
                cfg.attention_dropout = p;
            }
            EncoderState::new(cfg)?
        }
    };
    let trace = encoder::train_mlm(
        &mut state,
        &examples,
        &TrainConfig {
            steps: a.steps,
            batch_size: a.batch_size,
            learning_rate: a.learning_rate,
            warmup_fraction: a.warmup_fraction,
            linear_decay: !a.no_decay,
            seed,
        },
    )?;
    state.save(&a.out)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_text(&sibling(&a.out, "loss.csv"), &csv)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        log::info!("loss {first:.4} -> {last:.4} over {} steps", trace.len());
    }
    Ok(())
}

fn grad_check(a: &GradCheckArgs, seed: u64) -> CliResult {
    record_config("grad-check", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let examples: Vec<corpus::MaskedExample> = jsonl::read(&a.examples)?;
    let ex = examples
        .iter()
        .find(|e| !e.mask_positions.is_empty())
        .ok_or_else(|| Error::Input("no example with masked positions".into()))?;
    let state = match &a.checkpoint {
        Some(p) => load_encoder(p, &vocab)?,
        None => {
            let mut cfg = a.model_size.config(vocab.len());
            cfg.seed = seed;
            EncoderState::new(cfg)?
        }
    };
    let report = encoder::gradient_check(&state, ex, a.epsilon, a.samples, seed)?;
    write_json(&a.out, &report)?;
    if !report.passes(a.tolerance) {
        return Err(CliError::Failed(format!(
            "max relative error {:.3e} exceeds {:.1e}",
            report.max_relative_error, a.tolerance
        )));
    }
    println!("max relative error {:.3e} over {} parameters", report.max_relative_error, report.sampled);
    Ok(())
}

fn tag_train(a: &TagTrainArgs, seed: u64) -> CliResult {
    record_config("tag-train", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let enc = load_encoder(&a.checkpoint, &vocab)?;
    let train = datasets::read_conllu(&a.train)?;
    let dev = a.dev.as_ref().map(datasets::read_conllu).transpose()?;
    let (model, log) = heads::train_pos(&enc, &vocab, &train, dev.as_deref(), &a.tuning.config(seed))?;
    model.save(&a.out)?;
    write_json(&sibling(&a.out, "log.json"), &log)?;
    Ok(())
}

fn tag_eval(a: &TagEvalArgs, seed: u64) -> CliResult {
    record_config("tag-eval", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let model = PosModel::load(&a.model)?;
    check_vocab(&model.encoder, &vocab)?;
    let test = datasets::read_conllu(&a.test)?;
    let eval = heads::evaluate_pos(&model, &vocab, &test)?;
    write_json(&a.out, &eval)?;
    if let Some(p) = &a.predictions {
        let mut w = create(p)?;
        for s in &test {
            let tagged = model.tag(&vocab, &s.tokens);
            for (tok, tag) in s.tokens.iter().zip(&tagged.tags) {
                writeln!(w, "{tok}\t{tag}").map_err(Error::from)?;
            }
            writeln!(w).map_err(Error::from)?;
        }
        w.flush().map_err(Error::from)?;
    }
    println!("accuracy {:.4} ({}/{})", eval.accuracy, eval.correct, eval.total);
    Ok(())
}

fn wsd_mine(a: &WsdMineArgs, seed: u64) -> CliResult {
    record_config("wsd-mine", seed, a, &a.out)?;
    let entries: Vec<datasets::DictionaryEntry> = jsonl::read(&a.input)?;
    let cfg = SenseMiningConfig {
        min_per_sense: a.min_per_sense,
        min_words: a.min_words,
        dev_fraction: a.dev_fraction,
        test_fraction: a.test_fraction,
        seed,
    };
    let (examples, report) = datasets::mine_sense_examples(&entries, &cfg)?;
    jsonl::write(&a.out, &examples)?;
    write_json(&sibling(&a.out, "report.json"), &report)?;
    Ok(())
}

fn wsd_train(a: &WsdTrainArgs, seed: u64) -> CliResult {
    let log_path = a.out_dir.join("training.json");
    record_config("wsd-train", seed, a, &log_path)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let enc = load_encoder(&a.checkpoint, &vocab)?;
    let examples: Vec<SenseExample> = jsonl::read(&a.input)?;
    let trained = heads::train_wsd_all(&enc, &vocab, &examples, &a.tuning.config(seed))?;
    let mut logs = BTreeMap::new();
    for (head, (model, training)) in trained {
        model.save(a.out_dir.join(format!("{head}.model")))?;
        logs.insert(head, training);
    }
    write_json(&log_path, &logs)?;
    Ok(())
}

fn wsd_eval(a: &WsdEvalArgs, seed: u64) -> CliResult {
    record_config("wsd-eval", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.models)
        .map_err(|e| Error::file(&a.models, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "model"))
        .collect();
    paths.sort();
    let mut models = BTreeMap::new();
    for p in paths {
        let m = WsdModel::load(&p)?;
        check_vocab(&m.encoder, &vocab)?;
        models.insert(m.headword.clone(), m);
    }
    let test: Vec<SenseExample> = jsonl::read(&a.input)?;
    let eval = heads::evaluate_wsd(&models, &vocab, &test)?;
    write_json(&a.out, &eval)?;
    println!("accuracy {:.4} ({}/{})", eval.accuracy, eval.correct, eval.total);
    Ok(())
}

fn mine_emendations(a: &MineEmendationsArgs, seed: u64) -> CliResult {
    record_config("mine-emendations", seed, a, &a.out)?;
    let texts: Vec<(String, String)> = read_documents(&a.input)?.into_iter().map(|d| (d.id, d.text)).collect();
    let training = read_sentences(&a.training)?;
    let ngrams = datasets::training_ngrams(training.iter().map(|s| s.tokens.as_slice()));
    let (examples, report) = datasets::mine_emendations(&texts, &ngrams);
    jsonl::write(&a.out, &examples)?;
    write_json(&sibling(&a.out, "report.json"), &report)?;
    Ok(())
}

fn infill_rank(a: &InfillRankArgs, seed: u64) -> CliResult {
    record_config("infill-rank", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let state = load_encoder(&a.checkpoint, &vocab)?;
    let examples: Vec<datasets::EmendationExample> = jsonl::read(&a.input)?;
    let lexicon = infill::candidate_lexicon(&read_sentences(&a.lexicon)?, a.min_frequency);
    let rankings = infill::rank_all(&state, &vocab, &examples, &lexicon)?;
    jsonl::write(&a.out, &rankings)?;
    if a.top > 0 {
        let mut out = std::io::stdout().lock();
        for (ex, r) in examples.iter().zip(&rankings) {
            let _ = writeln!(out, "{}", infill::format_ranking(ex, r, a.top));
        }
    }
    Ok(())
}

fn infill_eval(a: &InfillEvalArgs, seed: u64) -> CliResult {
    record_config("infill-eval", seed, a, &a.out)?;
    let rankings: Vec<CandidateRanking> = jsonl::read(&a.rankings)?;
    let examples: Vec<datasets::EmendationExample> = jsonl::read(&a.examples)?;
    let golds: Vec<String> = examples.into_iter().map(|e| e.gold_word).collect();
    let m = infill::evaluate_infilling(&rankings, &golds)?;
    write_json(&a.out, &m)?;
    println!(
        "n={} top1={:.3} top10={:.3} top50={:.3} mrr={:.3}",
        m.n_examples, m.top1, m.top10, m.top50, m.mrr
    );
    Ok(())
}

fn read_citations(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(d, c)| (d.to_string(), c.to_string()))
                .ok_or_else(|| {
                    Error::Parse {
                        line: i + 1,
                        message: "expected doc_id TAB citation".into(),
                    }
                    .into()
                })
        })
        .collect()
}

fn index_build(a: &IndexBuildArgs, seed: u64) -> CliResult {
    record_config("index-build", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let state = load_encoder(&a.checkpoint, &vocab)?;
    let sentences = raw_sentences(&a.input)?;
    let citations = match &a.citations {
        Some(p) => read_citations(p)?,
        None => BTreeMap::new(),
    };
    let cfg = IndexConfig {
        layer: a.layer,
        include_punctuation: a.include_punctuation,
        shards: a.shards,
    };
    let (index, report) = neighbors::build_index(&state, &vocab, &sentences, &citations, &cfg)?;
    index.save(&a.out)?;
    write_json(&sibling(&a.out, "report.json"), &report)?;
    Ok(())
}

fn index_query(a: &IndexQueryArgs, seed: u64) -> CliResult {
    record_config("index-query", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let state = load_encoder(&a.checkpoint, &vocab)?;
    let index = EmbeddingIndex::load(&a.index)?;
    let corpus = a.corpus.as_deref().map(raw_sentences).transpose()?;
    let sentence = match (&a.text, &a.doc) {
        (Some(t), None) => Sentence::new("query", 0, t.as_str()),
        (None, Some(doc)) => corpus
            .iter()
            .flatten()
            .find(|s| &s.doc_id == doc && s.index == a.sentence)
            .cloned()
            .ok_or_else(|| Error::Input(format!("no sentence {doc}:{} in the corpus", a.sentence)))?,
        _ => return Err(CliError::Usage("give either --text or --doc".into())),
    };
    let target = match (&a.word, &a.form) {
        (Some(w), _) => *w,
        (None, Some(f)) => sentence
            .tokens
            .iter()
            .position(|t| t.surface.to_lowercase() == f.to_lowercase())
            .ok_or_else(|| Error::Input(format!("form {f:?} not in the query sentence")))?,
        (None, None) => return Err(CliError::Usage("give either --word or --form".into())),
    };
    let origin = RecordKey {
        doc_id: sentence.doc_id.clone(),
        sentence_index: sentence.index as u32,
        word_index: target as u32,
    };
    let exclude = (a.exclude_self && a.doc.is_some()).then_some(&origin);
    let hits = index.query(&state, &vocab, &sentence.tokens, target, a.k, exclude)?;
    let store = corpus.as_deref().map(SentenceStore::new);
    let rows = neighbors::hit_rows(&index, &hits, store.as_ref());
    jsonl::write(&a.out, &rows)?;
    print!("{}", neighbors::format_hits(&rows));
    Ok(())
}

fn dump_embeddings(a: &DumpEmbeddingsArgs, seed: u64) -> CliResult {
    record_config("dump-embeddings", seed, a, &a.out)?;
    let vocab = SubwordVocab::load(&a.vocab)?;
    let state = load_encoder(&a.checkpoint, &vocab)?;
    let sentences = raw_sentences(&a.input)?;
    let layer = a.layer.unwrap_or(state.num_layers());
    let dumps = heads::dump_embeddings(&state, &vocab, &sentences, &a.form, layer)?;
    let mut w = create(&a.out)?;
    heads::write_embedding_csv(&mut w, &dumps, state.hidden_size())?;
    w.flush().map_err(Error::from)?;
    log::info!("{} occurrences of {:?}", dumps.len(), a.form);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_file_parsing() {
        let m = parse_config_file("# c\nsteps = 5\n\nlearning_rate=0.1\n").unwrap();
        assert_eq!(m["steps"], "5");
        assert_eq!(m["learning-rate"], "0.1");
        assert!(parse_config_file("steps 5").is_err());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "steps=7\nbatch-size=3\nno-decay=true\n").unwrap();
        let args = [
            "verba", "pretrain", "--config", cfg.to_str().unwrap(), "--vocab", "v", "--examples", "e", "--out", "o",
            "--steps", "9",
        ];
        let cli = parse(&args.map(OsString::from)).unwrap();
        let Command::Pretrain(p) = cli.command else { panic!() };
        assert_eq!((p.steps, p.batch_size, p.no_decay), (9, 3, true));
    }

    #[test]
    fn unknown_flag_and_missing_file_are_usage_errors() {
        assert_eq!(run(["verba", "tokenize", "--bogus"]), EXIT_USAGE);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.tok");
        let code = run(["verba", "tokenize", "--in", "/nonexistent/a.txt", "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_USAGE);
    }

    #[test]
    fn tokenize_writes_token_lines_and_config() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("a.txt");
        let out = dir.path().join("a.tok");
        fs::write(&input, "arma virumque cano").unwrap();
        assert_eq!(run(["verba", "tokenize", "--in", input.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        assert_eq!(fs::read_to_string(&out).unwrap(), "arma virum -que cano\n");
        let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(sibling(&out, "config.json")).unwrap()).unwrap();
        assert_eq!(cfg["command"], "tokenize");
    }
}
