//! `gradsam`: generate planted-rationale corpora, train the tiny encoder,
//! explain predictions, run masking evaluations and render HTML reports.
//!
//! Exit status: 0 on success, 2 for usage and configuration errors, 1 for
//! failures while running.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gradsam::attribution::{Aggregation, AttributionResult, ExplainOptions};
use gradsam::autodiff::backward_pass_count;
use gradsam::dataset::{encode_records, Dataset, Split};
use gradsam::eval::{evaluate, Direction, EvalPlan, MaskingSpec, MetricKind, Ranker};
use gradsam::model::predicted_class;
use gradsam::report::{render_html, ReportColumn};
use gradsam::store::{self, load_dataset, save_dataset, save_json, DatasetFormat, RunManifest, WeightsManifest};
use gradsam::synthetic::{generate_corpus, SyntheticTaskSpec};
use gradsam::trainer::{train, TrainConfig};
use gradsam::{
    explain, par, EncoderWeights, Exec, MaskPolicy, MethodKind, Model, ModelConfig, Precision, Real, Tokenizer, Vocab,
};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "gradsam", version, about = "Gradient-weighted self-attention token attribution")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted rationales.
    GenData(GenData),
    /// Train the encoder on a labelled corpus.
    Train(TrainArgs),
    /// Score the tokens of one or more sentences.
    Explain(ExplainArgs),
    /// Keep or mask the top-k ranked tokens and score the re-predictions.
    Evaluate(EvaluateArgs),
    /// Render attribution JSON files as a static HTML page.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenData {
    /// Task spec JSON, or `single-trigger` / `topics` for the bundled ones.
    #[arg(long)]
    spec: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `.csv` writes CSV, anything else JSON lines.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// JSON with optional `train` and `model` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_weights: PathBuf,
    /// Seeds both initialization and shuffling; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Sentence to explain; repeat for several.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    text: Vec<String>,
    /// Explain every record of a dataset (test split if present).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    method: MethodKind,
    /// Class whose logit is explained. Defaults to the gold label with
    /// `--data` and to the predicted class with `--text`.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, value_enum, default_value_t = AggregationArg::Row)]
    aggregation: AggregationArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `all`, or a comma list of method names, `oracle` and `random:<seed>`.
    #[arg(long, default_value = "all")]
    methods: String,
    /// Fractions of real tokens; comma-separated for several.
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    k: Vec<f64>,
    #[arg(long, value_enum, default_value_t = DirectionArg::Keep)]
    direction: DirectionArg,
    /// Seeds for random-ranking baselines added to the method list.
    #[arg(long, value_delimiter = ',')]
    random_seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = MetricArg::MacroF1)]
    metric: MetricArg,
    #[arg(long, value_enum, default_value_t = PolicyArg::Mask)]
    policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = AggregationArg::Row)]
    aggregation: AggregationArg,
    #[arg(long)]
    out: PathBuf,
    /// Also write flat `method,k,direction,metric,value` rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    attributions: Vec<PathBuf>,
    #[arg(long, default_value = "Token importance")]
    title: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    Row,
    Column,
}

#[derive(Clone, Copy, ValueEnum)]
enum DirectionArg {
    Keep,
    MaskTop,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    MacroF1,
    Accuracy,
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// Replace with `[MASK]`.
    Mask,
    /// Delete and re-pad.
    Delete,
}

fn parse_method(s: &str) -> Result<MethodKind, String> {
    s.parse().map_err(|_| {
        let names: Vec<&str> = MethodKind::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

/// A bad argument or configuration file; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || e.downcast_ref::<gradsam::Error>().is_some_and(gradsam::Error::is_config)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}

fn run(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a, exec),
        Command::Train(a) => train_cmd(a, exec),
        Command::Explain(a) => with_model(&a.weights.clone(), |m, v| explain_cmd(m, v, a, exec)),
        Command::Evaluate(a) => with_model(&a.weights.clone(), |m, v| evaluate_cmd(m, v, a, exec)),
        Command::Report(a) => report_cmd(a),
    }
}

/// `<out>.run.json` next to the main output.
fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("run.json")
}

fn gen_data(a: GenData, exec: Exec) -> Result<()> {
    let mut manifest = RunManifest::new("gen-data");
    let spec = match a.spec.as_str() {
        "single-trigger" => SyntheticTaskSpec::single_trigger(),
        "topics" => SyntheticTaskSpec::topics(),
        path => {
            manifest.input("spec", path)?;
            store::load_json(path, None).map_err(|e| usage(format!("task spec {path}: {e}")))?
        }
    };
    if a.count == 0 {
        bail!(usage("--count must be positive"));
    }
    let vocab = Vocab::builtin();
    let data = generate_corpus(&spec, &vocab, a.count, a.seed, exec)?;
    save_dataset(&a.out, &data, DatasetFormat::from_path(&a.out))?;
    manifest.seeds.insert("corpus".into(), a.seed);
    manifest.config_hash("spec", &spec)?;
    manifest.config = serde_json::to_value(&spec)?;
    manifest.output("data", &a.out)?;
    manifest.save(manifest_path(&a.out))?;
    log::info!("wrote {} records to {}", data.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    /// Full model configuration; the vocabulary size is taken from the
    /// built-in vocabulary when omitted.
    model: Option<ModelConfig>,
    num_classes: Option<usize>,
}

fn load_data(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let data = load_dataset(path, DatasetFormat::from_path(path), num_classes)?;
    if data.is_empty() {
        bail!(usage(format!("{} holds no records", path.display())));
    }
    Ok(data)
}

fn train_cmd(a: TrainArgs, exec: Exec) -> Result<()> {
    let mut manifest = RunManifest::new("train");
    let mut file = match &a.config {
        Some(path) => {
            manifest.input("config", path)?;
            store::load_json::<TrainFile>(path, None).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainFile::default(),
    };
    if let Some(seed) = a.seed {
        file.train.seed = seed;
    }
    file.train.validate()?;
    let data = load_data(&a.data, None)?;
    manifest.input("data", &a.data)?;
    let max_label = data.records.iter().map(|r| r.label).max().unwrap_or(0);
    let classes = file.num_classes.unwrap_or((max_label + 1).max(2));
    if max_label >= classes {
        bail!(usage(format!("label {max_label} does not fit {classes} classes")));
    }
    let vocab = Vocab::builtin();
    let cfg = file.model.clone().unwrap_or_else(|| {
        ModelConfig::tiny(vocab.len(), if classes == 2 { 2 } else { classes })
    });
    cfg.validate()?;
    if cfg.num_classes() != classes {
        bail!(usage(format!("model has {} classes, data needs {classes}", cfg.num_classes())));
    }
    let seed = file.train.seed;
    let report = match cfg.precision {
        Precision::F32 => fit::<f32>(&cfg, &vocab, &data, &file.train, exec, &a.out_weights)?,
        Precision::F64 => fit::<f64>(&cfg, &vocab, &data, &file.train, exec, &a.out_weights)?,
    };
    manifest.seeds.insert("init".into(), seed);
    manifest.seeds.insert("shuffle".into(), seed);
    manifest.config_hash("model", &cfg)?;
    manifest.config_hash("train", &file.train)?;
    manifest.config = serde_json::json!({ "model": cfg, "train": file.train, "report": report });
    manifest.output("weights", &a.out_weights)?;
    manifest.output("blob", store::blob_path(&a.out_weights))?;
    manifest.save(manifest_path(&a.out_weights))?;
    Ok(())
}

fn fit<T: Real>(
    cfg: &ModelConfig,
    vocab: &Vocab,
    data: &Dataset,
    tc: &TrainConfig,
    exec: Exec,
    out: &Path,
) -> Result<gradsam::trainer::TrainReport> {
    let tok = Tokenizer::new(vocab.clone());
    let enc = |s| encode_records(&tok, &data.split(s), cfg.seq_len);
    let train_set = enc(Split::Train)?;
    if train_set.is_empty() {
        bail!(usage("the data has no train split"));
    }
    let validation = enc(Split::Validation)?;
    let init = EncoderWeights::<T>::init(cfg, tc.seed)?;
    let (weights, report) = train(init, &train_set, &validation, tc, exec)?;
    if let Some(acc) = report.validation_accuracy {
        log::info!("validation accuracy {acc:.4}");
    }
    store::save_weights(out, &weights, Some(vocab))?;
    Ok(report)
}

/// Loads weights at their stored precision and hands them to `f` with the
/// stored vocabulary (or the built-in one).
fn with_model(path: &Path, f: impl FnOnce(AnyModel, Vocab) -> Result<()>) -> Result<()> {
    let manifest: WeightsManifest = store::load_json(path, None)?;
    let model = match manifest.precision {
        Precision::F32 => AnyModel::F32(load::<f32>(path)?),
        Precision::F64 => AnyModel::F64(load::<f64>(path)?),
    };
    let vocab = manifest.vocab.map(Vocab::from_tokens).transpose()?.unwrap_or_else(Vocab::builtin);
    if vocab.len() != model.config().vocab_size {
        bail!("vocabulary has {} entries, model expects {}", vocab.len(), model.config().vocab_size);
    }
    f(model, vocab)
}

fn load<T: Real>(path: &Path) -> Result<Model<T>> {
    let (weights, _) = store::load_weights::<T>(path)?;
    Ok(Model::new(weights)?)
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }
}

macro_rules! dispatch {
    ($model:expr, $m:ident => $body:expr) => {
        match $model {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

fn options(aggregation: AggregationArg) -> ExplainOptions {
    ExplainOptions {
        aggregation: match aggregation {
            AggregationArg::Row => Aggregation::Row,
            AggregationArg::Column => Aggregation::Column,
        },
        ..ExplainOptions::default()
    }
}

fn explain_cmd(model: AnyModel, vocab: Vocab, a: ExplainArgs, exec: Exec) -> Result<()> {
    let mut manifest = RunManifest::new("explain");
    manifest.input("weights", &a.weights)?;
    let cfg = model.config().clone();
    if let Some(c) = a.class {
        if c >= cfg.num_outputs {
            bail!(usage(format!("--class {c} out of range for {} outputs", cfg.num_outputs)));
        }
    }
    let tok = Tokenizer::new(vocab);
    // (sentence, class fixed by the data) pairs
    let items: Vec<(gradsam::TokenSequence, Option<usize>)> = match &a.data {
        Some(path) => {
            manifest.input("data", path)?;
            let data = load_data(path, Some(cfg.num_classes()))?;
            encode_records(&tok, &data.eval_records(), cfg.seq_len)?
                .into_iter()
                .map(|e| (e.seq, (cfg.num_outputs > 1).then_some(e.label)))
                .collect()
        }
        None => a
            .text
            .iter()
            .map(|t| Ok((tok.encode(t, cfg.seq_len)?, None)))
            .collect::<Result<_>>()?,
    };
    let opts = options(a.aggregation);
    let outcome: Vec<(AttributionResult, u64)> = dispatch!(&model, m => {
        par::try_map(exec, &items, |_, (seq, gold)| {
            let class = match (a.class, gold) {
                (Some(c), _) => Some(c),
                (None, Some(g)) => Some(*g),
                (None, None) => (cfg.num_outputs > 1).then(|| m.logits(seq).map(|l| predicted_class(&l))).transpose()?,
            };
            let before = backward_pass_count();
            let r = explain(m, seq, a.method, class, &opts)?;
            Ok((r, backward_pass_count() - before))
        })?
    });
    let backward: u64 = outcome.iter().map(|o| o.1).sum();
    let results: Vec<AttributionResult> = outcome.into_iter().map(|o| o.0).collect();
    if a.data.is_none() && results.len() == 1 {
        save_json(&a.out, &results[0])?;
    } else {
        save_json(&a.out, &results)?;
    }
    manifest.config = serde_json::json!({
        "method": a.method,
        "class": a.class,
        "options": opts,
        "sentences": results.len(),
        "backward_passes": backward,
    });
    manifest.config_hash("options", &opts)?;
    manifest.output("attributions", &a.out)?;
    manifest.save(manifest_path(&a.out))?;
    Ok(())
}

fn parse_rankers(list: &str, random_seeds: &[u64]) -> Result<Vec<Ranker>> {
    let mut rankers = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if name == "all" {
            rankers.extend(MethodKind::ALL.into_iter().map(Ranker::Method));
        } else {
            rankers.push(name.parse::<Ranker>().map_err(usage)?);
        }
    }
    rankers.extend(random_seeds.iter().map(|&seed| Ranker::Random { seed }));
    let mut seen = std::collections::HashSet::new();
    rankers.retain(|r| seen.insert(*r));
    if rankers.is_empty() {
        bail!(usage("no methods to evaluate"));
    }
    Ok(rankers)
}

fn evaluate_cmd(model: AnyModel, vocab: Vocab, a: EvaluateArgs, exec: Exec) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate");
    manifest.input("weights", &a.weights)?;
    manifest.input("data", &a.data)?;
    let rankers = parse_rankers(&a.methods, &a.random_seeds)?;
    let policy = match a.policy {
        PolicyArg::Mask => MaskPolicy::ReplaceWithMask,
        PolicyArg::Delete => MaskPolicy::DeleteAndRepad,
    };
    let directions: &[Direction] = match a.direction {
        DirectionArg::Keep => &[Direction::KeepTopK],
        DirectionArg::MaskTop => &[Direction::MaskTopK],
        DirectionArg::Both => &[Direction::KeepTopK, Direction::MaskTopK],
    };
    let mut specs = Vec::new();
    for &k in &a.k {
        for &d in directions {
            specs.push(MaskingSpec::new(k, d, policy)?);
        }
    }
    let cfg = model.config().clone();
    let data = load_data(&a.data, Some(cfg.num_classes()))?;
    let tok = Tokenizer::new(vocab);
    let examples = encode_records(&tok, &data.eval_records(), cfg.seq_len)?;
    let plan = EvalPlan {
        corpus_id: manifest.inputs["data"].sha256.clone(),
        model_hash: manifest.inputs["weights"].sha256.clone(),
        rankers,
        specs,
        metric: match a.metric {
            MetricArg::MacroF1 => MetricKind::MacroF1,
            MetricArg::Accuracy => MetricKind::Accuracy,
        },
        options: options(a.aggregation),
    };
    let report = dispatch!(&model, m => evaluate(m, &examples, &plan, exec)?);
    store::save_report(&a.out, &report)?;
    manifest.output("report", &a.out)?;
    if let Some(csv) = &a.csv {
        let file = std::fs::File::create(csv).with_context(|| format!("creating {}", csv.display()))?;
        report.write_csv(file)?;
        manifest.output("csv", csv)?;
    }
    for r in &plan.rankers {
        if let Ranker::Random { seed } = r {
            manifest.seeds.insert(r.to_string(), *seed);
        }
    }
    manifest.config_hash("specs", &plan.specs)?;
    manifest.config_hash("options", &plan.options)?;
    manifest.config = serde_json::json!({
        "rankers": plan.rankers,
        "specs": plan.specs,
        "metric": plan.metric,
        "options": plan.options,
    });
    manifest.save(manifest_path(&a.out))?;
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let mut manifest = RunManifest::new("report");
    let mut columns = Vec::new();
    for path in &a.attributions {
        let value: serde_json::Value = store::load_json(path, None)?;
        let results: Vec<AttributionResult> = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|r| vec![r])
        }
        .with_context(|| format!("{} is not attribution JSON", path.display()))?;
        let label = match results.first() {
            Some(r) if results.iter().all(|x| x.method == r.method) => r.method.to_string(),
            _ => path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned()),
        };
        manifest.input(&format!("attributions[{}]", columns.len()), path)?;
        columns.push(ReportColumn { label, results });
    }
    let html = render_html(&a.title, &columns);
    std::fs::write(&a.out, html).with_context(|| format!("writing {}", a.out.display()))?;
    manifest.output("html", &a.out)?;
    manifest.save(manifest_path(&a.out))?;
    Ok(())
}
