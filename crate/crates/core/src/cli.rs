//! Command-line front end: one subcommand per pipeline stage, all driven by
//! a shared JSON run configuration whose values can be overridden by flags.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelBundle;
use crate::corpus::{self, LabelTriple, LabeledExample, TaskLabelA, Threshold};
use crate::encoder::EncoderConfig;
use crate::evaluation::{self, default_grid, threshold_search, Ensemble, VotedLabels};
use crate::mtl::{Gold, HeadConfig, LossWeights, ModelKind, MtlModel};
use crate::textnorm::{default_substitutions, EmojiTable, NormalizedTweet, Normalizer, UnigramTable};
use crate::tokenizer::{TokenSequence, Vocabulary, CLS, PAD};
use crate::training::{self, encode_labeled, encode_scored, EncodedExample, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Whole-token replacements applied after mention collapsing.
    pub substitutions: BTreeMap<String, String>,
    /// Emoji name table (`emoji<TAB>name`); the bundled table when absent.
    pub emoji_table: Option<PathBuf>,
    /// Unigram counts (`word<TAB>count`) for hashtag segmentation.
    pub unigrams: Option<PathBuf>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { substitutions: default_substitutions(), emoji_table: None, unigrams: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: Option<usize>,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_freq: 1, max_size: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub scored: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run needs; `encoder.vocab_size` is replaced by the size of
/// the vocabulary actually built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub vocab: VocabConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub ensemble_size: usize,
    /// AVG_CONF binarization threshold for scored data mixed into training.
    pub threshold: f64,
    /// Held-out fraction when no validation file is given.
    pub val_fraction: f64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            vocab: VocabConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            ensemble_size: 5,
            threshold: 0.3,
            val_fraction: 0.1,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))
    }

    fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if let Err(e) = self.train.validate() {
            return usage(e.to_string());
        }
        if self.ensemble_size == 0 {
            return usage("ensemble_size must be at least 1".into());
        }
        if Threshold::new(self.threshold).is_err() {
            return usage(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return usage(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.vocab.min_freq == 0 {
            return usage("vocab.min_freq must be at least 1".into());
        }
        if self.head.hidden == 0 {
            return usage("head.hidden must be at least 1".into());
        }
        Ok(())
    }

    pub fn normalizer(&self) -> anyhow::Result<Normalizer> {
        let emoji = match &self.preprocess.emoji_table {
            Some(p) => EmojiTable::load(p)?,
            None => EmojiTable::bundled().clone(),
        };
        let unigrams = match &self.preprocess.unigrams {
            Some(p) => UnigramTable::load(p)?,
            None => UnigramTable::new(),
        };
        Ok(Normalizer::new(emoji, unigrams).with_substitutions(self.preprocess.substitutions.clone()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "offense-mtl", version, about = "Hierarchical multi-task offensive-language classification")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize a labeled (or scored) TSV and write it back out.
    Preprocess(PreprocessArgs),
    /// Train a multi-task or baseline model with early stopping.
    Train(TrainArgs),
    /// Warm up an encoder by regression on AVG_CONF scores.
    Pretrain(PretrainArgs),
    /// Score a checkpoint on a labeled TSV.
    Evaluate(EvaluateArgs),
    /// Write per-tweet predictions of one checkpoint.
    Predict(PredictArgs),
    /// Majority-vote predictions of several checkpoints, optionally training them first.
    Ensemble(EnsembleArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Pick the AVG_CONF threshold that best matches gold task-A labels.
    ThresholdSearch(ThresholdArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Overrides {
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Loss weights as `a,b,c`.
    #[arg(long)]
    weights: Option<String>,
    /// `mtl` or `baseline`.
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Debug, Args)]
struct PreprocessArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Treat the input as scored (`id, text, average, std`).
    #[arg(long)]
    scored: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Scored data binarized at `threshold` and added to the training set.
    #[arg(long)]
    scored: Option<PathBuf>,
    /// Start from this checkpoint (and its vocabulary).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    scored: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    overrides: Overrides,
    /// Comma-separated member checkpoints.
    #[arg(long, value_delimiter = ',')]
    models: Vec<PathBuf>,
    /// Train `ensemble_size` members on this file instead of loading them.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    /// Trained members are saved as `<prefix>.member<i>.ckpt`.
    #[arg(long)]
    save_prefix: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// `mtl` or `baseline`.
    #[arg(long)]
    kind: Option<String>,
}

#[derive(Debug, Args)]
struct ThresholdArgs {
    #[command(flatten)]
    common: Common,
    /// Scored validation data.
    #[arg(long)]
    scored: Option<PathBuf>,
    /// Gold task-A labels from a labeled TSV, joined on id.
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Without --gold, task-A predictions of this checkpoint serve as gold.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated thresholds; 0.1..0.9 by default.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `offense-mtl --help` for usage");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Preprocess(a) => preprocess(a),
        Command::Train(a) => train(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Predict(a) => predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::ThresholdSearch(a) => threshold(a),
    }
}

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    Ok(config)
}

fn parse_kind(s: &str) -> CliResult<ModelKind> {
    match s {
        "mtl" => Ok(ModelKind::Mtl),
        "baseline" => Ok(ModelKind::Baseline),
        other => Err(CliError::Usage(format!("unknown model kind {other:?} (expected mtl or baseline)"))),
    }
}

fn apply_overrides(config: &mut RunConfig, o: &Overrides) -> CliResult<()> {
    let t = &mut config.train;
    if let Some(v) = o.lr {
        t.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = o.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = o.patience {
        t.patience = v;
    }
    if let Some(w) = &o.weights {
        let parts: Vec<f64> = w
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--weights expects three numbers, got {w:?}")))?;
        let [a, b, c] = parts[..] else {
            return Err(CliError::Usage(format!("--weights expects three numbers, got {w:?}")));
        };
        t.loss_weights = LossWeights::new(a, b, c).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(k) = &o.kind {
        t.kind = parse_kind(k)?;
    }
    Ok(())
}

fn required(flag: Option<&PathBuf>, fallback: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(fallback.as_ref())
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or paths.{name} in the config)")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn echo_config(config: &RunConfig, out: &Path) -> anyhow::Result<()> {
    write(&with_suffix(out, ".config.json"), &config.to_json())
}

fn run_header(command: &str, config: &RunConfig) -> String {
    let t = &config.train;
    let w = t.loss_weights.as_array();
    format!(
        "# {command} kind={} learning_rate={} batch_size={} max_epochs={} patience={} loss_weights={},{},{} seed={}",
        t.kind.as_str(),
        t.learning_rate,
        t.batch_size,
        t.max_epochs,
        t.patience,
        w[0],
        w[1],
        w[2],
        t.seed
    )
}

fn preprocess(a: PreprocessArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    config.validate()?;
    let input = required(a.input.as_ref(), &config.paths.data, "input")?;
    let out = required(a.out.as_ref(), &config.paths.out, "out")?;
    config.paths.data = Some(input.clone());
    config.paths.out = Some(out.clone());
    let normalizer = config.normalizer()?;
    let count = if a.scored {
        let data = corpus::load_scored(&input, &normalizer).map_err(anyhow::Error::from)?;
        corpus::save_scored(&out, &data).map_err(anyhow::Error::from)?;
        data.len()
    } else {
        let data = corpus::load_labeled(&input, &normalizer).map_err(anyhow::Error::from)?;
        corpus::save_labeled(&out, &data).map_err(anyhow::Error::from)?;
        data.len()
    };
    echo_config(&config, &out)?;
    println!("normalized {count} examples -> {}", out.display());
    Ok(())
}

struct Prepared {
    vocab: Vocabulary,
    model: MtlModel,
}

fn prepare_model(config: &mut RunConfig, texts: &[&str], init: Option<&Path>) -> CliResult<Prepared> {
    if let Some(path) = init {
        let bundle = ModelBundle::load(path).map_err(anyhow::Error::from)?;
        config.encoder = *bundle.model.encoder_config();
        config.head = bundle.model.head_config;
        return Ok(Prepared { vocab: bundle.vocab, model: bundle.model });
    }
    let vocab = Vocabulary::build(texts.iter().copied(), config.vocab.min_freq, config.vocab.max_size)
        .map_err(anyhow::Error::from)?;
    config.encoder.vocab_size = vocab.len();
    config.encoder.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let model = MtlModel::init(config.encoder, config.head, config.train.seed).map_err(anyhow::Error::from)?;
    Ok(Prepared { vocab, model })
}

/// Training and validation sets: explicit files, or a seeded split of the
/// training file. Scored data is binarized and appended to training only.
fn load_training_data(
    config: &RunConfig,
    normalizer: &Normalizer,
    train_path: &Path,
    val_path: Option<&Path>,
    scored: Option<&Path>,
) -> anyhow::Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let all = corpus::load_labeled(train_path, normalizer)?;
    let (mut train_set, val) = match val_path {
        Some(v) => (all, corpus::load_labeled(v, normalizer)?),
        None => corpus::split(&all, (1.0 - config.val_fraction, config.val_fraction), config.train.seed)?,
    };
    if let Some(s) = scored {
        let threshold = Threshold::new(config.threshold)?;
        train_set.extend(corpus::binarize(&corpus::load_scored(s, normalizer)?, threshold));
    }
    if train_set.is_empty() || val.is_empty() {
        bail!("training and validation sets must be non-empty");
    }
    Ok((train_set, val))
}

fn train(a: TrainArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    apply_overrides(&mut config, &a.overrides)?;
    config.validate()?;
    let train_path = required(a.train.as_ref(), &config.paths.train, "train")?;
    let out = required(a.out.as_ref(), &config.paths.out, "out")?;
    let val_path = a.val.or(config.paths.val.clone());
    let scored = a.scored.or(config.paths.scored.clone());
    config.paths.train = Some(train_path.clone());
    config.paths.val = val_path.clone();
    config.paths.scored = scored.clone();
    config.paths.model = a.init.clone();
    config.paths.out = Some(out.clone());

    let header = run_header("train", &config);
    println!("{header}");
    let normalizer = config.normalizer()?;
    let (train_set, val) = load_training_data(&config, &normalizer, &train_path, val_path.as_deref(), scored.as_deref())?;
    let texts: Vec<&str> = train_set.iter().map(|ex| ex.tweet.text.as_str()).collect();
    let Prepared { vocab, model } = prepare_model(&mut config, &texts, a.init.as_deref())?;
    let max_len = config.encoder.max_len;
    let (model, history) = training::train(
        model,
        &encode_labeled(&train_set, &vocab, max_len),
        &encode_labeled(&val, &vocab, max_len),
        &config.train,
    )
    .map_err(anyhow::Error::from)?;

    let bundle = ModelBundle { kind: config.train.kind, vocab, model, loss_weights: config.train.loss_weights };
    bundle.save(&out).map_err(anyhow::Error::from)?;
    write(&with_suffix(&out, ".metrics.txt"), &format!("{header}\n{}", history.to_text()))?;
    echo_config(&config, &out)?;
    print!("{}", history.to_text());
    println!("saved {}", out.display());
    Ok(())
}

fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    apply_overrides(&mut config, &a.overrides)?;
    config.validate()?;
    let scored_path = required(a.scored.as_ref(), &config.paths.scored, "scored")?;
    let out = required(a.out.as_ref(), &config.paths.out, "out")?;
    config.paths.scored = Some(scored_path.clone());
    config.paths.out = Some(out.clone());

    let header = run_header("pretrain", &config);
    println!("{header}");
    let normalizer = config.normalizer()?;
    let scored = corpus::load_scored(&scored_path, &normalizer).map_err(anyhow::Error::from)?;
    let texts: Vec<&str> = scored.iter().map(|ex| ex.tweet.text.as_str()).collect();
    let Prepared { vocab, model } = prepare_model(&mut config, &texts, None)?;
    let encoded = encode_scored(&scored, &vocab, config.encoder.max_len);
    let (model, history) = training::pretrain_regression(model, &encoded, &config.train).map_err(anyhow::Error::from)?;

    let bundle = ModelBundle { kind: ModelKind::Mtl, vocab, model, loss_weights: config.train.loss_weights };
    bundle.save(&out).map_err(anyhow::Error::from)?;
    write(&with_suffix(&out, ".metrics.txt"), &format!("{header}\n{}", history.to_text()))?;
    echo_config(&config, &out)?;
    print!("{}", history.to_text());
    println!("saved {}", out.display());
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    config.validate()?;
    let model_path = required(a.model.as_ref(), &config.paths.model, "model")?;
    let data_path = required(a.data.as_ref(), &config.paths.data, "data")?;
    config.paths.model = Some(model_path.clone());
    config.paths.data = Some(data_path.clone());
    config.paths.out = a.report.clone();

    let bundle = ModelBundle::load(&model_path).map_err(anyhow::Error::from)?;
    let data = corpus::load_labeled(&data_path, &config.normalizer()?).map_err(anyhow::Error::from)?;
    let report = evaluation::evaluate(&bundle, &data).map_err(anyhow::Error::from)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = &a.report {
        write(path, &text)?;
        echo_config(&config, path)?;
    }
    Ok(())
}

fn prediction_lines(ids: &[&str], labels: &[(TaskLabelA, Option<(String, String)>)]) -> String {
    let mut out = String::from("id\tlabel_a\tlabel_b\tlabel_c\n");
    for (id, (a, rest)) in ids.iter().zip(labels) {
        let (b, c) = rest.clone().unwrap_or_else(|| ("-".into(), "-".into()));
        let _ = writeln!(out, "{id}\t{a}\t{b}\t{c}");
    }
    out
}

fn voted_lines(tweets: &[NormalizedTweet], voted: &[VotedLabels]) -> String {
    let ids: Vec<&str> = tweets.iter().map(|t| t.id.as_str()).collect();
    let labels: Vec<_> = voted.iter().map(|v| (v.a, Some((v.b.to_string(), v.c.to_string())))).collect();
    prediction_lines(&ids, &labels)
}

fn predict(a: PredictArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    config.validate()?;
    let model_path = required(a.model.as_ref(), &config.paths.model, "model")?;
    let data_path = required(a.data.as_ref(), &config.paths.data, "data")?;
    let out = required(a.out.as_ref(), &config.paths.out, "out")?;
    config.paths.model = Some(model_path.clone());
    config.paths.data = Some(data_path.clone());
    config.paths.out = Some(out.clone());

    let bundle = ModelBundle::load(&model_path).map_err(anyhow::Error::from)?;
    let tweets = corpus::load_tweets(&data_path, &config.normalizer()?).map_err(anyhow::Error::from)?;
    if tweets.is_empty() {
        return Err(anyhow::anyhow!("{} has no tweets", data_path.display()).into());
    }
    let seqs: Vec<TokenSequence> = tweets.iter().map(|t| bundle.encode(&t.text)).collect();
    let ids: Vec<&str> = tweets.iter().map(|t| t.id.as_str()).collect();
    let labels: Vec<_> = match bundle.kind {
        ModelKind::Mtl => bundle
            .predict_triples(&seqs)
            .map_err(anyhow::Error::from)?
            .into_iter()
            .map(|p| (p.a.label, Some((p.b.label.to_string(), p.c.label.to_string()))))
            .collect(),
        ModelKind::Baseline => {
            bundle.predict_a(&seqs).map_err(anyhow::Error::from)?.into_iter().map(|p| (p.label, None)).collect()
        }
    };
    write(&out, &prediction_lines(&ids, &labels))?;
    echo_config(&config, &out)?;
    println!("wrote {} predictions -> {}", tweets.len(), out.display());
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    apply_overrides(&mut config, &a.overrides)?;
    config.validate()?;
    if config.train.kind != ModelKind::Mtl {
        return Err(CliError::Usage("ensembles are built from multi-task models".into()));
    }
    let train_path = a.train.clone().or(config.paths.train.clone());
    let members = match (&train_path, a.models.is_empty()) {
        (Some(_), false) => return Err(CliError::Usage("give either --models or --train, not both".into())),
        (None, true) => return Err(CliError::Usage("missing --models (or --train to train members)".into())),
        (None, false) => a
            .models
            .iter()
            .map(|p| ModelBundle::load(p).with_context(|| format!("loading {}", p.display())))
            .collect::<anyhow::Result<Vec<_>>>()?,
        (Some(train_path), true) => {
            let prefix = required(a.save_prefix.as_ref(), &config.paths.out, "save-prefix")?;
            config.paths.train = Some(train_path.clone());
            config.paths.val = a.val.clone().or(config.paths.val.clone());
            println!("{}", run_header("ensemble", &config));
            let normalizer = config.normalizer()?;
            let (train_set, val) =
                load_training_data(&config, &normalizer, train_path, config.paths.val.as_deref(), None)?;
            let texts: Vec<&str> = train_set.iter().map(|ex| ex.tweet.text.as_str()).collect();
            let Prepared { vocab, .. } = prepare_model(&mut config, &texts, None)?;
            let max_len = config.encoder.max_len;
            let (enc, head) = (config.encoder, config.head);
            let trained = training::train_ensemble(
                |seed| MtlModel::init(enc, head, seed),
                config.ensemble_size,
                &encode_labeled(&train_set, &vocab, max_len),
                &encode_labeled(&val, &vocab, max_len),
                &config.train,
            )
            .map_err(anyhow::Error::from)?;
            let mut bundles = Vec::with_capacity(trained.len());
            for (i, (model, history)) in trained.into_iter().enumerate() {
                let bundle = ModelBundle {
                    kind: ModelKind::Mtl,
                    vocab: vocab.clone(),
                    model,
                    loss_weights: config.train.loss_weights,
                };
                let path = with_suffix(&prefix, &format!(".member{i}.ckpt"));
                bundle.save(&path).map_err(anyhow::Error::from)?;
                write(&with_suffix(&path, ".metrics.txt"), &history.to_text())?;
                println!("member {i}: best_val_f1_a {:.6} -> {}", history.best_val_f1_a, path.display());
                bundles.push(bundle);
            }
            echo_config(&config, &prefix)?;
            bundles
        }
    };
    let ensemble = Ensemble::new(members).map_err(anyhow::Error::from)?;
    let data_path = a.data.clone().or(config.paths.data.clone());
    let Some(data_path) = data_path else {
        return Ok(());
    };
    let out = required(a.out.as_ref(), &config.paths.out, "out")?;
    config.paths.data = Some(data_path.clone());
    config.paths.out = Some(out.clone());
    let tweets = corpus::load_tweets(&data_path, &config.normalizer()?).map_err(anyhow::Error::from)?;
    let texts: Vec<&str> = tweets.iter().map(|t| t.text.as_str()).collect();
    let voted = ensemble.predict(&texts).map_err(anyhow::Error::from)?;
    write(&out, &voted_lines(&tweets, &voted))?;
    echo_config(&config, &out)?;
    println!("wrote {} voted predictions from {} members -> {}", voted.len(), ensemble.len(), out.display());
    Ok(())
}

/// A random batch of well-formed sequences with consistent label triples.
pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, vocab_size: usize, max_len: usize) -> Vec<EncodedExample> {
    let triples = LabelTriple::all();
    (0..n)
        .map(|_| {
            let real = rng.gen_range(2..=max_len);
            let mut ids = vec![CLS];
            ids.extend((1..real).map(|_| rng.gen_range(CLS + 1..vocab_size as u32)));
            ids.resize(max_len, PAD);
            let mut mask = vec![1u8; real];
            mask.resize(max_len, 0);
            let labels = triples[rng.gen_range(0..triples.len())];
            EncodedExample { seq: TokenSequence { ids, mask }, gold: Gold { labels, synthetic: false } }
        })
        .collect()
}

/// Encoder used by `gradcheck` when no configuration file is given.
pub fn default_gradcheck_model() -> (EncoderConfig, HeadConfig) {
    (EncoderConfig::tiny(32), HeadConfig { hidden: 8 })
}

fn gradcheck(a: GradcheckArgs) -> CliResult<()> {
    let config = load_config(&a.common)?;
    config.validate()?;
    let (encoder, head) = match &a.common.config {
        Some(_) => (config.encoder, config.head),
        None => default_gradcheck_model(),
    };
    encoder.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if encoder.vocab_size < 4 {
        return Err(CliError::Usage("gradcheck needs encoder.vocab_size >= 4".into()));
    }
    if a.batch == 0 || !(a.epsilon > 0.0) {
        return Err(CliError::Usage("--batch and --epsilon must be positive".into()));
    }
    let kind = match &a.kind {
        Some(k) => parse_kind(k)?,
        None => config.train.kind,
    };
    let seed = config.train.seed;
    let model = MtlModel::init(encoder, head, seed).map_err(anyhow::Error::from)?;
    let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(seed), a.batch, encoder.vocab_size, encoder.max_len);
    let report = training::check_gradients(&model, &batch, a.epsilon, kind, config.train.loss_weights)
        .map_err(anyhow::Error::from)?;
    println!("parameters {}", report.n_params);
    println!("loss {:.10}", report.loss);
    println!("max_relative_error {:.3e} at {}[{}]", report.max_relative_error, report.worst.0, report.worst.1);
    if report.passes(a.tolerance) {
        println!("PASS (tolerance {:e})", a.tolerance);
        Ok(())
    } else {
        println!("FAIL (tolerance {:e})", a.tolerance);
        Err(anyhow::anyhow!("gradient check failed").into())
    }
}

fn threshold(a: ThresholdArgs) -> CliResult<()> {
    let mut config = load_config(&a.common)?;
    config.validate()?;
    let scored_path = required(a.scored.as_ref(), &config.paths.scored, "scored")?;
    config.paths.scored = Some(scored_path.clone());
    let normalizer = config.normalizer()?;
    let scored = corpus::load_scored(&scored_path, &normalizer).map_err(anyhow::Error::from)?;
    let model_path = a.model.clone().or(config.paths.model.clone());
    let golds: Vec<TaskLabelA> = match (&a.gold, model_path) {
        (Some(gold_path), _) => {
            let labeled = corpus::load_labeled(gold_path, &normalizer).map_err(anyhow::Error::from)?;
            let by_id: BTreeMap<&str, TaskLabelA> =
                labeled.iter().map(|ex| (ex.tweet.id.as_str(), ex.labels.a())).collect();
            scored
                .iter()
                .map(|ex| {
                    by_id
                        .get(ex.tweet.id.as_str())
                        .copied()
                        .ok_or_else(|| anyhow::anyhow!("no gold label for id {}", ex.tweet.id))
                })
                .collect::<anyhow::Result<_>>()?
        }
        (None, Some(model_path)) => {
            config.paths.model = Some(model_path.clone());
            let bundle = ModelBundle::load(&model_path).map_err(anyhow::Error::from)?;
            let seqs: Vec<TokenSequence> = scored.iter().map(|ex| bundle.encode(&ex.tweet.text)).collect();
            bundle.predict_a(&seqs).map_err(anyhow::Error::from)?.into_iter().map(|p| p.label).collect()
        }
        (None, None) => return Err(CliError::Usage("missing --gold or --model".into())),
    };
    let grid = if a.grid.is_empty() { default_grid() } else { a.grid.clone() };
    let avg: Vec<f64> = scored.iter().map(|ex| ex.avg_conf).collect();
    let choice = threshold_search(&avg, &golds, &grid).map_err(anyhow::Error::from)?;
    let mut text = String::new();
    for (t, f) in &choice.scores {
        let _ = writeln!(text, "threshold {t} macro_f1 {f:.6}");
    }
    let _ = writeln!(
        text,
        "best {} macro_f1 {:.6}{}",
        choice.threshold,
        choice.macro_f1,
        if choice.degenerate { " degenerate" } else { "" }
    );
    print!("{text}");
    if let Some(out) = &a.out {
        config.paths.out = Some(out.clone());
        write(out, &text)?;
        echo_config(&config, out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_json() {
        let config = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&config.to_json()).unwrap();
        assert_eq!(back, config);
        let partial: RunConfig = serde_json::from_str(r#"{"train": {"learning_rate": 3e-6}}"#).unwrap();
        assert_eq!(partial.train.learning_rate, 3e-6);
        assert_eq!(partial.train.batch_size, 32);
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn random_batch_is_well_formed() {
        let batch = random_batch(&mut ChaCha8Rng::seed_from_u64(1), 20, 10, 8);
        for ex in &batch {
            assert_eq!(ex.seq.ids[0], CLS);
            assert!(ex.seq.real_positions().skip(1).all(|(_, id)| id > CLS && id < 10));
        }
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["offense-mtl"]), 2);
        assert_eq!(run(["offense-mtl", "frobnicate"]), 2);
        assert_eq!(run(["offense-mtl", "train"]), 2);
        assert_eq!(run(["offense-mtl", "train", "--kind", "svm", "--train", "x", "--out", "y"]), 2);
    }
}
