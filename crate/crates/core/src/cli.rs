//! Command-line experiment driver.
//!
//! Every command reads one TOML config, applies `--set section.key=value`
//! overrides and command flags on top (flags win over the file, the file
//! wins over defaults), and writes its outputs plus a `manifest.json` under
//! the output root (`--output-root`, else `$DICE_OUTPUT_ROOT`, else `runs`).

use std::ffi::OsString;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{train_baseline, BaselineConfig, BaselineKind, FittedBaseline, ItemPop};
use crate::checkpoint::{Checkpoint, CheckpointError, TrainedModel};
use crate::dataset::{binarize, parse_ratings, DatasetError, InteractionTable, RatingFormat};
use crate::evaluator::{evaluate, export_embeddings, iou_with_itempop, EvalContext, MetricsReport};
use crate::model::{ScoreVariant, Scorer};
use crate::splitter::{draw_split, Partition, SplitBundle, SplitConfig, SplitError};
use crate::synthetic::{planted_table, zipf_table, PlantedSpec, ZipfSpec};
use crate::trainer::{fit, FitOutput, StopReason, TrainConfig, TrainError};

pub const OUTPUT_ROOT_ENV: &str = "DICE_OUTPUT_ROOT";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("{context}: {source}")]
    Dataset { context: String, source: DatasetError },
    #[error("{context}: {source}")]
    Split { context: String, source: SplitError },
    #[error("training {model}: {source}")]
    Train { model: String, source: TrainError },
    #[error("{context}: {source}")]
    Checkpoint { context: String, source: CheckpointError },
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    /// 2 for usage errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Input {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "dice",
    version,
    about = "Train and evaluate disentangled causal recommenders"
)]
pub struct Cli {
    /// Directory for all outputs; overrides $DICE_OUTPUT_ROOT.
    #[arg(long, global = true)]
    pub output_root: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    /// TOML config file; defaults apply to anything it omits.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `train.beta=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Pnsm,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the intervened split from ratings or a synthetic generator.
    Prepare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Ratings file; overrides `data.path`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train one model on the prepared split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// dice, mf, ips, ips-c, ips-cn, ips-cnsr, bias-u, bias-i, bias-ui or cause.
        #[arg(long, short)]
        model: String,
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[arg(long, value_enum)]
        curriculum: Option<OnOff>,
        /// Drop the conformity task from the objective.
        #[arg(long)]
        no_conformity_task: bool,
    },
    /// Score a trained model (or ItemPop) on the test partition.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Model name; `itempop` needs no checkpoint.
        #[arg(long, short)]
        model: String,
        /// Defaults to `<root>/models/<model>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated cutoffs; overrides `eval.ks`.
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Comma-separated variants (full, int, con); overrides `eval.variants`.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Also remove validation items from test candidates.
        #[arg(long)]
        exclude_validation: bool,
    },
    /// Merge metric reports into one table with deltas against a reference.
    Compare {
        /// Metric report JSON files written by `evaluate`.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Reference row as `model` or `model/variant`; defaults to the first report.
        #[arg(long)]
        reference: Option<String>,
    },
    /// Write DICE embeddings with per-item popularity groups.
    ExportEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, short, default_value = "dice")]
        model: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Movielens,
    Csv,
    Planted,
    Zipf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Ratings file, relative to the config file's directory.
    pub path: Option<PathBuf>,
    /// Ratings at or above this value become interactions.
    pub threshold: f64,
    /// Column layout override for file sources.
    pub columns: Option<RatingFormat>,
    pub planted: PlantedSpec,
    pub zipf: ZipfSpec,
    /// Seed of the synthetic generators.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Movielens,
            path: None,
            threshold: 5.0,
            columns: None,
            planted: PlantedSpec::default(),
            zipf: ZipfSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub variants: Vec<String>,
    pub exclude_validation: bool,
    /// Cutoffs of the ItemPop overlap curve.
    pub iou_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![20, 50],
            variants: vec!["full".into(), "int".into(), "con".into()],
            exclude_validation: false,
            iou_ks: vec![10, 20, 30, 40, 50],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub baselines: BaselineConfig,
    pub eval: EvalConfig,
}

/// Parses `text` as TOML, applies `key=value` overrides and deserializes.
pub fn resolve_config(text: &str, overrides: &[String]) -> Result<Config, String> {
    let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| e.to_string())?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| format!("override '{o}' is not KEY=VALUE"))?;
        let value = parse_value(raw.trim());
        let mut parts: Vec<&str> = key.trim().split('.').collect();
        let last = parts
            .pop()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| format!("empty key in '{o}'"))?;
        let mut table = &mut root;
        for p in parts {
            table = table
                .entry(p)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| format!("'{p}' in '{o}' is not a table"))?;
        }
        table.insert(last.to_string(), value);
    }
    toml::Value::Table(root)
        .try_into()
        .map_err(|e: toml::de::Error| e.to_string())
}

/// A TOML literal if it parses as one, else a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

struct Loaded {
    config: Config,
    base_dir: PathBuf,
}

fn load_config(args: &ConfigArgs) -> Result<Loaded, CliError> {
    let (text, base_dir) = match &args.config {
        Some(path) => (
            fs::read_to_string(path).map_err(io_err(path))?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (String::new(), PathBuf::from(".")),
    };
    let config = resolve_config(&text, &args.overrides).map_err(|message| CliError::Input {
        path: args.config.clone().unwrap_or_else(|| PathBuf::from("<defaults>")),
        message,
    })?;
    Ok(Loaded { config, base_dir })
}

/// Everything needed to reproduce one command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub parallel: bool,
    pub config: Config,
    pub seed: u64,
    /// SHA-256 of the command's input data.
    pub input_digest: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
    /// Resolved values not present in the config (margins, conventions).
    pub resolved: serde_json::Value,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn split(&self) -> PathBuf {
        self.root.join("split")
    }
    fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }
    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
    fn embeddings(&self, name: &str) -> PathBuf {
        self.root.join("embeddings").join(name)
    }
    fn compare(&self) -> PathBuf {
        self.root.join("compare")
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let root = cli
        .output_root
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let layout = Layout { root };
    match cli.command {
        Command::Prepare { config, input } => cmd_prepare(&layout, &config, input),
        Command::Train {
            config,
            model,
            strategy,
            curriculum,
            no_conformity_task,
        } => {
            let mut loaded = load_config(&config)?;
            let t = &mut loaded.config.train;
            if let Some(s) = strategy {
                t.strategy = match s {
                    StrategyArg::Pnsm => crate::sampler::Strategy::Pnsm,
                    StrategyArg::Random => crate::sampler::Strategy::Random,
                };
            }
            if let Some(c) = curriculum {
                t.curriculum = c == OnOff::On;
            }
            if no_conformity_task {
                t.conformity_task = false;
            }
            cmd_train(&layout, &loaded.config, &model)
        }
        Command::Evaluate {
            config,
            model,
            checkpoint,
            ks,
            variants,
            exclude_validation,
        } => {
            let mut loaded = load_config(&config)?;
            let e = &mut loaded.config.eval;
            if let Some(ks) = ks {
                e.ks = ks;
            }
            if let Some(v) = variants {
                e.variants = v;
            }
            if exclude_validation {
                e.exclude_validation = true;
            }
            cmd_evaluate(&layout, &loaded.config, &model, checkpoint)
        }
        Command::Compare { reports, reference } => cmd_compare(&layout, &reports, reference.as_deref()),
        Command::ExportEmbeddings {
            config,
            model,
            checkpoint,
        } => {
            let loaded = load_config(&config)?;
            cmd_export(&layout, &loaded.config, &model, checkpoint)
        }
    }
}

fn load_table(data: &DataConfig, base_dir: &Path) -> Result<(InteractionTable, String), CliError> {
    let synth_digest = |spec: &dyn erased::Json| sha256_hex(&[spec.json().as_bytes(), &data.seed.to_le_bytes()]);
    let dataset_err = |context: String| move |source| CliError::Dataset { context, source };
    match data.source {
        DataSource::Planted => {
            let t = planted_table(&data.planted, data.seed).map_err(dataset_err("planted generator".into()))?;
            Ok((t.table, synth_digest(&data.planted)))
        }
        DataSource::Zipf => {
            let t = zipf_table(&data.zipf, data.seed).map_err(dataset_err("zipf generator".into()))?;
            Ok((t, synth_digest(&data.zipf)))
        }
        DataSource::Movielens | DataSource::Csv => {
            let rel = data
                .path
                .as_ref()
                .ok_or_else(|| CliError::Usage("data.path (or --input) is required for file sources".into()))?;
            let path = if rel.is_absolute() {
                rel.clone()
            } else {
                base_dir.join(rel)
            };
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let format = data.columns.clone().unwrap_or_else(|| match data.source {
                DataSource::Csv => RatingFormat::csv(),
                _ => RatingFormat::movielens(),
            });
            let ratings = parse_ratings(BufReader::new(bytes.as_slice()), &format)
                .map_err(dataset_err(path.display().to_string()))?;
            let table = InteractionTable::from_pairs(binarize(&ratings, data.threshold));
            Ok((table, sha256_hex(&[&bytes])))
        }
    }
}

mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).unwrap_or_default()
        }
    }
}

fn cmd_prepare(layout: &Layout, args: &ConfigArgs, input: Option<PathBuf>) -> Result<(), CliError> {
    let started = now();
    let mut loaded = load_config(args)?;
    if let Some(p) = input {
        loaded.config.data.path = Some(std::path::absolute(&p).map_err(io_err(&p))?);
    }
    let cfg = &loaded.config;
    let (table, digest) = load_table(&cfg.data, &loaded.base_dir)?;
    if table.records().is_empty() {
        return Err(CliError::Failed("no interactions survive binarization".into()));
    }
    let split = draw_split(&table, &cfg.split).map_err(|source| CliError::Split {
        context: "drawing split".into(),
        source,
    })?;
    let dir = layout.split();
    split.save(&dir).map_err(|source| CliError::Split {
        context: dir.display().to_string(),
        source,
    })?;
    let mut cache = Vec::new();
    table.write_cache(&mut cache).map_err(|source| CliError::Dataset {
        context: "table cache".into(),
        source,
    })?;
    write_file(&dir.join("table.bin"), &cache)?;

    let report = &split.report;
    let entropy_line = |p| report.entropy(p).map_or("n/a".to_string(), |e| format!("{e:.4}"));
    println!(
        "prepared {} records ({} users, {} items); intervened pool {}",
        report.total_records, split.n_users, split.n_items, report.intervened_pool
    );
    println!(
        "entropy: train_normal {}  train {}  validation {}  test {}",
        entropy_line(Partition::TrainNormal),
        report.train_entropy.map_or("n/a".to_string(), |e| format!("{e:.4}")),
        entropy_line(Partition::Validation),
        entropy_line(Partition::Test)
    );

    let mut outputs: Vec<PathBuf> = Partition::ALL.iter().map(|p| dir.join(p.file_name())).collect();
    outputs.push(dir.join(crate::splitter::SPLIT_MANIFEST));
    outputs.push(dir.join("table.bin"));
    write_json(
        &dir.join(MANIFEST),
        &RunManifest {
            command: "prepare".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: crate::par::is_parallel(),
            config: cfg.clone(),
            seed: cfg.split.seed,
            input_digest: digest,
            started_unix: started,
            finished_unix: now(),
            outputs,
            resolved: serde_json::json!({ "split_digest": split_digest(&dir)? }),
        },
    )
}

/// Digest of the four partition files.
fn split_digest(dir: &Path) -> Result<String, CliError> {
    let mut parts = Vec::new();
    for p in Partition::ALL {
        let path = dir.join(p.file_name());
        parts.push(fs::read(&path).map_err(io_err(&path))?);
    }
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(sha256_hex(&refs))
}

fn load_split(layout: &Layout) -> Result<(SplitBundle, String), CliError> {
    let dir = layout.split();
    if !dir.join(crate::splitter::SPLIT_MANIFEST).exists() {
        return Err(CliError::Input {
            path: dir,
            message: "no prepared split; run `dice prepare` first".into(),
        });
    }
    let split = SplitBundle::load(&dir).map_err(|source| CliError::Split {
        context: dir.display().to_string(),
        source,
    })?;
    Ok((split, split_digest(&dir)?))
}

fn write_log<M>(path: &Path, out: &FitOutput<M>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    out.write_log(&mut buf).map_err(io_err(path))?;
    write_file(path, &buf)
}

fn cmd_train(layout: &Layout, cfg: &Config, model: &str) -> Result<(), CliError> {
    let started = now();
    let kind = if model == "dice" {
        None
    } else {
        Some(BaselineKind::parse(model).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown model '{model}'; expected dice, {}",
                BaselineKind::ALL.map(|k| k.name()).join(", ")
            ))
        })?)
    };
    let (split, digest) = load_split(layout)?;
    let train_err = |source| CliError::Train {
        model: model.to_string(),
        source,
    };
    let (trained, log_path, stop, resolved) = match kind {
        None => {
            let fit = fit(&split, &cfg.train).map_err(train_err)?;
            let dir = layout.model(model);
            write_log(&dir.join("train_log.jsonl"), &fit.output)?;
            let resolved = serde_json::json!({
                "m_up0": fit.resolved.m_up0,
                "m_down0": fit.resolved.m_down0,
                "margin_units": "popularity counts",
                "training_records": fit.resolved.training_records,
                "best_epoch": fit.output.best_epoch,
                "stop": fit.output.stop,
                "loss_reduction": "sum",
                "early_stopping": format!("validation recall@{}, patience {}", cfg.train.validation_k, cfg.train.patience),
            });
            let stop = fit.output.stop;
            let mut csv = Vec::new();
            fit.embeddings()
                .write_csv(&mut csv)
                .map_err(|e| CliError::Failed(e.to_string()))?;
            write_file(&dir.join("embeddings.csv"), &csv)?;
            (
                TrainedModel::Dice(fit.output.model.embeddings),
                dir.join("train_log.jsonl"),
                stop,
                resolved,
            )
        }
        Some(kind) => {
            let fit = train_baseline(kind, &split, &cfg.train, &cfg.baselines).map_err(train_err)?;
            let dir = layout.model(model);
            write_log(&dir.join("train_log.jsonl"), &fit.output)?;
            let mut resolved = serde_json::json!({
                "embedding_dim": 2 * cfg.train.dim,
                "best_epoch": fit.output.best_epoch,
                "stop": fit.output.stop,
                "loss_reduction": "sum",
                "early_stopping": format!("validation recall@{}, patience {}", cfg.train.validation_k, cfg.train.patience),
            });
            if let FittedBaseline::Factorization(f) = &fit.model {
                if let Some(ips) = &f.ips {
                    resolved["ips"] = serde_json::to_value(ips).unwrap_or_default();
                }
            }
            (
                TrainedModel::Baseline { kind, model: fit.model },
                dir.join("train_log.jsonl"),
                fit.output.stop,
                resolved,
            )
        }
    };
    let dir = layout.model(model);
    let ck_path = dir.join("checkpoint.bin");
    let mut buf = Vec::new();
    trained
        .to_checkpoint(serde_json::json!({ "seed": cfg.train.seed, "split_digest": digest }))
        .write(&mut buf)
        .map_err(|source| CliError::Checkpoint {
            context: ck_path.display().to_string(),
            source,
        })?;
    write_file(&ck_path, &buf)?;
    let mut outputs = vec![ck_path.clone(), log_path];
    if kind.is_none() {
        outputs.push(dir.join("embeddings.csv"));
    }
    write_json(
        &dir.join(MANIFEST),
        &RunManifest {
            command: format!("train {model}"),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: crate::par::is_parallel(),
            config: cfg.clone(),
            seed: cfg.train.seed,
            input_digest: digest,
            started_unix: started,
            finished_unix: now(),
            outputs,
            resolved,
        },
    )?;
    if stop == StopReason::Diverged {
        return Err(CliError::Failed(format!(
            "training {model} diverged; best earlier snapshot saved to {}",
            ck_path.display()
        )));
    }
    println!("trained {model}; checkpoint at {}", ck_path.display());
    Ok(())
}

fn load_model(layout: &Layout, model: &str, checkpoint: Option<PathBuf>) -> Result<TrainedModel, CliError> {
    let path = checkpoint.unwrap_or_else(|| layout.model(model).join("checkpoint.bin"));
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let ck = Checkpoint::read(BufReader::new(file)).map_err(|source| CliError::Checkpoint {
        context: path.display().to_string(),
        source,
    })?;
    TrainedModel::from_checkpoint(ck).map_err(|source| CliError::Checkpoint {
        context: path.display().to_string(),
        source,
    })
}

fn check_shape(trained: &TrainedModel, split: &SplitBundle) -> Result<(), CliError> {
    if trained.n_users() != split.n_users || trained.n_items() != split.n_items {
        return Err(CliError::Failed(format!(
            "checkpoint has {} users x {} items but the split has {} users x {} items",
            trained.n_users(),
            trained.n_items(),
            split.n_users,
            split.n_items
        )));
    }
    Ok(())
}

fn cmd_evaluate(layout: &Layout, cfg: &Config, model: &str, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let started = now();
    let (split, digest) = load_split(layout)?;
    let mut ctx = EvalContext::new(&split);
    ctx.exclude_validation = cfg.eval.exclude_validation;
    if cfg.eval.ks.is_empty() || cfg.eval.ks.contains(&0) {
        return Err(CliError::Usage(
            "eval.ks must be a nonempty list of positive cutoffs".into(),
        ));
    }
    let variants: Vec<ScoreVariant> = cfg
        .eval
        .variants
        .iter()
        .map(|v| {
            ScoreVariant::parse(v)
                .ok_or_else(|| CliError::Usage(format!("unknown variant '{v}'; expected full, int or con")))
        })
        .collect::<Result<_, _>>()?;

    let trained = if model == "itempop" {
        None
    } else {
        let t = load_model(layout, model, checkpoint)?;
        check_shape(&t, &split)?;
        Some(t)
    };
    let supported: &[ScoreVariant] = match &trained {
        Some(t) => t.variants(),
        None => &[ScoreVariant::Full],
    };
    let (variants, skipped): (Vec<ScoreVariant>, Vec<ScoreVariant>) =
        variants.into_iter().partition(|v| supported.contains(v));
    for v in &skipped {
        eprintln!("note: {model} has no '{}' variant; skipped", v.short_name());
    }
    if variants.is_empty() {
        return Err(CliError::Usage(format!(
            "none of the requested variants apply to {model}"
        )));
    }

    let dir = layout.report(model);
    let mut outputs = Vec::new();
    let mut metrics_csv = Vec::new();
    let mut iou_csv = Vec::new();
    for (n, &variant) in variants.iter().enumerate() {
        let scorer: Box<dyn Scorer + '_> = match &trained {
            None => Box::new(ItemPop {
                popularity: ctx.train_popularity.clone(),
            }),
            Some(t) => t.scorer(variant).map_err(|source| CliError::Checkpoint {
                context: model.to_string(),
                source,
            })?,
        };
        let mut report = evaluate(
            scorer.as_ref(),
            &ctx,
            Partition::Test,
            &cfg.eval.ks,
            model,
            variant.short_name(),
        );
        report.iou = iou_with_itempop(scorer.as_ref(), &ctx, Partition::Test, &cfg.eval.iou_ks);
        if report.users == 0 {
            return Err(CliError::Failed(
                "no test user has both test and training interactions".into(),
            ));
        }
        let path = dir.join(format!("metrics_{}.json", variant.short_name()));
        write_file(&path, report.to_json().as_bytes())?;
        outputs.push(path);
        report
            .write_csv(&mut metrics_csv, n == 0)
            .map_err(|e| CliError::Failed(e.to_string()))?;
        let mut one = Vec::new();
        report
            .write_iou_csv(&mut one)
            .map_err(|e| CliError::Failed(e.to_string()))?;
        let text = String::from_utf8_lossy(&one);
        let body = if n == 0 {
            text.as_ref()
        } else {
            text.split_once('\n').map_or("", |x| x.1)
        };
        iou_csv.extend_from_slice(body.as_bytes());
        print_report(&report);
    }
    for (name, bytes) in [("metrics.csv", &metrics_csv), ("iou.csv", &iou_csv)] {
        let path = dir.join(name);
        write_file(&path, bytes)?;
        outputs.push(path);
    }
    write_json(
        &dir.join(MANIFEST),
        &RunManifest {
            command: format!("evaluate {model}"),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: crate::par::is_parallel(),
            config: cfg.clone(),
            seed: cfg.train.seed,
            input_digest: digest,
            started_unix: started,
            finished_unix: now(),
            outputs,
            resolved: serde_json::json!({ "candidates": "all items minus the user's training items" }),
        },
    )
}

fn print_report(r: &MetricsReport) {
    let cells: Vec<String> = r
        .metrics
        .iter()
        .map(|m| {
            format!(
                "R@{k} {:.4}  HR@{k} {:.4}  NDCG@{k} {:.4}",
                m.recall,
                m.hit_ratio,
                m.ndcg,
                k = m.k
            )
        })
        .collect();
    println!("{}/{} ({} users): {}", r.model, r.variant, r.users, cells.join("  "));
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub values: Vec<f64>,
}

/// Consolidated table: columns are `metric@k` for every cutoff, rows one
/// per report, plus relative deltas against the reference row.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub columns: Vec<String>,
    pub rows: Vec<CompareRow>,
    pub reference: usize,
}

impl Comparison {
    pub fn build(reports: &[MetricsReport], reference: Option<&str>) -> Result<Self, String> {
        if reports.len() < 2 {
            return Err(format!("compare needs at least two reports, got {}", reports.len()));
        }
        let ks: Vec<usize> = reports[0].metrics.iter().map(|m| m.k).collect();
        for r in &reports[1..] {
            let other: Vec<usize> = r.metrics.iter().map(|m| m.k).collect();
            if other != ks {
                return Err(format!(
                    "report {}/{} has cutoffs {other:?} but {}/{} has {ks:?}",
                    r.model, r.variant, reports[0].model, reports[0].variant
                ));
            }
        }
        let columns = ks
            .iter()
            .flat_map(|k| ["recall", "hit_ratio", "ndcg"].map(|m| format!("{m}@{k}")))
            .collect();
        let rows: Vec<CompareRow> = reports
            .iter()
            .map(|r| CompareRow {
                label: format!("{}/{}", r.model, r.variant),
                values: r.metrics.iter().flat_map(|m| [m.recall, m.hit_ratio, m.ndcg]).collect(),
            })
            .collect();
        let reference = match reference {
            None => 0,
            Some(name) => rows
                .iter()
                .position(|r| r.label == name || r.label.split('/').next() == Some(name))
                .ok_or_else(|| format!("reference '{name}' matches no report"))?,
        };
        Ok(Self {
            columns,
            rows,
            reference,
        })
    }

    /// Index of the best row per column (first on ties).
    pub fn best(&self) -> Vec<usize> {
        (0..self.columns.len())
            .map(|c| {
                let mut best = 0;
                for (i, r) in self.rows.iter().enumerate() {
                    if r.values[c] > self.rows[best].values[c] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// `(value - reference) / reference`, `None` when the reference is 0.
    pub fn delta(&self, row: usize, col: usize) -> Option<f64> {
        let base = self.rows[self.reference].values[col];
        (base != 0.0).then(|| (self.rows[row].values[col] - base) / base)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let reference = &self.rows[self.reference].label;
        let mut header = vec!["model".to_string()];
        header.extend(self.columns.iter().cloned());
        header.extend(self.columns.iter().map(|c| format!("{c}_delta_vs_{reference}")));
        w.write_record(&header)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![r.label.clone()];
            rec.extend(r.values.iter().map(|v| v.to_string()));
            rec.extend((0..self.columns.len()).map(|c| self.delta(i, c).map_or(String::new(), |d| d.to_string())));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }

    pub fn to_markdown(&self) -> String {
        let best = self.best();
        let reference = &self.rows[self.reference].label;
        let mut out = format!("| model | {} |\n", self.columns.join(" | "));
        out.push_str(&format!("|---|{}\n", "---|".repeat(self.columns.len())));
        for (i, r) in self.rows.iter().enumerate() {
            let cells: Vec<String> = r
                .values
                .iter()
                .enumerate()
                .map(|(c, v)| {
                    let delta = if i == self.reference {
                        String::new()
                    } else {
                        self.delta(i, c)
                            .map_or(String::new(), |d| format!(" ({:+.1}%)", 100.0 * d))
                    };
                    if best[c] == i {
                        format!("**{v:.4}**{delta}")
                    } else {
                        format!("{v:.4}{delta}")
                    }
                })
                .collect();
            out.push_str(&format!("| {} | {} |\n", r.label, cells.join(" | ")));
        }
        out.push_str(&format!(
            "\nBold marks the best value per column; deltas are relative to {reference}.\n"
        ));
        out
    }
}

fn cmd_compare(layout: &Layout, paths: &[PathBuf], reference: Option<&str>) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).map_err(io_err(p))?;
        let r: MetricsReport = serde_json::from_str(&text).map_err(|e| CliError::Input {
            path: p.clone(),
            message: format!("not a metrics report: {e}"),
        })?;
        reports.push(r);
    }
    let table = Comparison::build(&reports, reference).map_err(CliError::Usage)?;
    let dir = layout.compare();
    let csv = table.to_csv().map_err(|e| CliError::Failed(e.to_string()))?;
    write_file(&dir.join("compare.csv"), &csv)?;
    let md = table.to_markdown();
    write_file(&dir.join("compare.md"), md.as_bytes())?;
    print!("{md}");
    Ok(())
}

fn cmd_export(layout: &Layout, cfg: &Config, model: &str, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let started = now();
    let (split, digest) = load_split(layout)?;
    let trained = load_model(layout, model, checkpoint)?;
    check_shape(&trained, &split)?;
    let TrainedModel::Dice(emb) = &trained else {
        return Err(CliError::Usage(format!(
            "export-embeddings needs a dice checkpoint, got '{}'",
            trained.name()
        )));
    };
    let dir = layout.embeddings(model);
    export_embeddings(emb, &split.training_popularity(), &dir).map_err(io_err(&dir))?;
    write_json(
        &dir.join(MANIFEST),
        &RunManifest {
            command: format!("export-embeddings {model}"),
            version: env!("CARGO_PKG_VERSION").into(),
            parallel: crate::par::is_parallel(),
            config: cfg.clone(),
            seed: cfg.train.seed,
            input_digest: digest,
            started_unix: started,
            finished_unix: now(),
            outputs: vec![dir.join("embeddings.csv"), dir.join("items.csv")],
            resolved: serde_json::json!({ "groups": "training-popularity terciles" }),
        },
    )?;
    println!("exported embeddings to {}", dir.display());
    Ok(())
}
