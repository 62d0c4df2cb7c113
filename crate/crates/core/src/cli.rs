//! Command-line front end: `gen-data`, `split`, `train`, `eval`, `export-vectors`.
//!
//! Settings resolve as flags over a JSON config file over defaults. For
//! `eval`, `export-vectors` and `train --stage dt` the defaults are the
//! configuration stored in the checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use crate::dataset::{
    generate_synthetic, generate_synthetic_embeddings, load_corpus, load_embeddings, split_classes,
    write_corpus, write_embeddings, ClassSplit, Corpus, EmbeddingTable, Partition, SplitSpec,
    SyntheticConfig, SyntheticEmbeddingConfig,
};
use crate::episode::{dump_episodes, EpisodeSampler};
use crate::error::{Error, Result};
use crate::eval::{evaluate_tasks, export_vectors_csv, Report};
use crate::metrics::ThresholdMode;
use crate::model::{Ablation, DistanceKind};
use crate::training::{train_main, train_policy, write_log, TrainConfig, TrainedModel};

#[derive(Debug, Parser)]
#[command(name = "fsacd", version, about = "Multi-label few-shot aspect category detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-aspect corpus.
    GenData(GenDataArgs),
    /// Split the classes of a corpus into train/val/test partitions.
    Split(SplitArgs),
    /// Train the main network (`--stage main`) or the threshold policy (`--stage dt`).
    Train(TrainArgs),
    /// Evaluate a checkpoint on sampled episodes.
    Eval(EvalArgs),
    /// Write prototypes and query representations of sampled episodes as CSV.
    ExportVectors(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output corpus (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub multi_frac: Option<f64>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Size of each class's signal-token pool.
    #[arg(long)]
    pub signal_tokens: Option<usize>,
    #[arg(long)]
    pub signal_per_aspect: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    /// Also write matching GloVe-format vectors here.
    #[arg(long)]
    pub embeddings_out: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub dim: usize,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output split file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Explicit class lists, comma separated. Override the counts.
    #[arg(long, value_delimiter = ',')]
    pub train_classes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub val_classes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub test_classes: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Main,
    Dt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ThresholdKind {
    Static,
    Dynamic,
}

/// Overrides shared by the commands that read a [`TrainConfig`].
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Ways per episode.
    #[arg(long)]
    pub n: Option<usize>,
    /// Shots per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// Queries per class.
    #[arg(long)]
    pub q: Option<usize>,
    /// Comma list of no-sa, no-wi, no-qa, no-dt (or none).
    #[arg(long)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Pre-trained vectors (GloVe text). Missing words and the whole table
    /// without this flag are drawn from N(0, 0.1).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Stage-one checkpoint to start from; required by `--stage dt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Per-epoch log (JSON lines).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Stage::Main)]
    pub stage: Stage,
    /// Defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub episodes_per_epoch: Option<usize>,
    #[arg(long)]
    pub val_episodes: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub policy_lr: Option<f64>,
    #[arg(long)]
    pub joint_lr: Option<f64>,
    #[arg(long)]
    pub freeze_embeddings: bool,
    #[arg(long)]
    pub squared_distance: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    /// Checkpoint; `{seed}` in the path is replaced by each evaluation seed.
    #[arg(long)]
    pub checkpoint: String,
    #[arg(long, default_value = "test")]
    pub partition: Partition,
    #[arg(long, value_enum, default_value_t = ThresholdKind::Static)]
    pub threshold: ThresholdKind,
    /// Static threshold; defaults to 0.3 below 10 ways, 0.2 otherwise.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Defaults to the configured seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Episodes per seed; defaults to `test_episodes`.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Report file (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Also write the evaluation episodes (JSON lines).
    #[arg(long)]
    pub dump_episodes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub partition: Partition,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 5)]
    pub seed: u64,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Split(a) => split(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::ExportVectors(a) => export_vectors(&a),
    }
}

/// Recursively overlays the object `top` onto `base`.
pub fn merge_json(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let file = File::open(path)
        .map_err(|e| Error::Config(format!("cannot open config {}: {e}", path.display())))?;
    let v: Value = serde_json::from_reader(std::io::BufReader::new(file))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
    }
    Ok(v)
}

/// Resolves a training configuration from a base value, an optional file and flags.
pub fn resolve_config(base: &TrainConfig, args: &ConfigArgs) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(base)?;
    if let Some(path) = &args.config {
        merge_json(&mut value, read_json(path)?);
    }
    let mut config: TrainConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config file: {e}")))?;
    if let Some(n) = args.n {
        config.n_way = n;
    }
    if let Some(k) = args.k {
        config.k_shot = k;
    }
    if let Some(q) = args.q {
        config.queries_per_class = q;
    }
    if let Some(a) = args.ablation {
        config.ablation = a;
    }
    Ok(config)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut value = serde_json::to_value(SyntheticConfig::default())?;
    if let Some(path) = &a.config {
        merge_json(&mut value, read_json(path)?);
    }
    let mut config: SyntheticConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("config file: {e}")))?;
    if let Some(v) = a.classes {
        config.num_classes = v;
    }
    if let Some(v) = a.per_class {
        config.sentences_per_class = v;
    }
    if let Some(v) = a.multi_frac {
        config.multi_aspect_fraction = v;
    }
    if let Some(v) = a.vocab {
        config.vocab_size = v;
    }
    if let Some(v) = a.min_len {
        config.sentence_length_range.0 = v;
    }
    if let Some(v) = a.max_len {
        config.sentence_length_range.1 = v;
    }
    if let Some(v) = a.signal_tokens {
        config.signal_tokens_per_class = v;
    }
    if let Some(v) = a.signal_per_aspect {
        config.signal_per_aspect = v;
    }
    let corpus = generate_synthetic(&config, a.seed)?;
    write_corpus(&corpus, &a.out)?;
    if let Some(path) = &a.embeddings_out {
        let base = SyntheticEmbeddingConfig::default();
        let emb = SyntheticEmbeddingConfig {
            dim: a.dim,
            aspect_rank: base.aspect_rank.min(a.dim),
            ..base
        };
        let vectors = generate_synthetic_embeddings(&config, &emb, a.seed)?;
        let mut w = BufWriter::new(File::create(path)?);
        write_embeddings(&vectors, &mut w)?;
        w.flush()?;
    }
    log::info!(
        "wrote {} sentences over {} classes to {}",
        corpus.sentences().len(),
        corpus.classes().len(),
        a.out.display()
    );
    Ok(())
}

fn split(a: &SplitArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let spec = if !a.train_classes.is_empty() || !a.val_classes.is_empty() || !a.test_classes.is_empty() {
        SplitSpec::Explicit(ClassSplit {
            train: a.train_classes.clone(),
            val: a.val_classes.clone(),
            test: a.test_classes.clone(),
        })
    } else {
        let total = corpus.classes().len();
        let (train, val, test) = match (a.train, a.val, a.test) {
            (Some(tr), Some(v), Some(te)) => (tr, v, te),
            (Some(tr), Some(v), None) => (tr, v, total.saturating_sub(tr + v)),
            (None, None, None) => {
                let tr = total * 3 / 5;
                let v = total / 5;
                (tr, v, total - tr - v)
            }
            _ => {
                return Err(Error::Config(
                    "give --train and --val (and optionally --test), or explicit class lists".into(),
                ))
            }
        };
        SplitSpec::Counts { train, val, test }
    };
    let split = split_classes(&corpus, &spec, a.seed)?;
    split.save(&a.out)?;
    log::info!(
        "split {} / {} / {} classes into {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        a.out.display()
    );
    Ok(())
}

fn load_split(path: &Path, corpus: &Corpus) -> Result<ClassSplit> {
    let split = ClassSplit::load(path)
        .map_err(|e| Error::Config(format!("cannot read split {}: {e}", path.display())))?;
    split.validate(corpus)?;
    Ok(split)
}

fn train(a: &TrainArgs) -> Result<()> {
    let stage_one = match (a.stage, &a.checkpoint) {
        (Stage::Dt, None) => {
            return Err(Error::Config("--stage dt needs --checkpoint from a stage-one run".into()))
        }
        (Stage::Dt, Some(path)) => Some(TrainedModel::load(path)?),
        (Stage::Main, _) => None,
    };
    let base = stage_one.as_ref().map(|m| m.config.clone()).unwrap_or_default();
    let mut config = resolve_config(&base, &a.common)?;
    if let Some(v) = a.episodes_per_epoch {
        config.episodes_per_epoch = v;
    }
    if let Some(v) = a.val_episodes {
        config.val_episodes = v;
    }
    if let Some(v) = a.max_epochs {
        config.max_epochs = v;
    }
    if let Some(v) = a.patience {
        config.patience = v;
    }
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.policy_lr {
        config.policy_learning_rate = v;
    }
    if let Some(v) = a.joint_lr {
        config.joint_learning_rate = v;
    }
    if a.freeze_embeddings {
        config.model.freeze_embeddings = true;
    }
    if a.squared_distance {
        config.model.distance = DistanceKind::SquaredEuclidean;
    }
    config.validate()?;
    let seed = a.seed.or_else(|| config.seeds.first().copied()).unwrap_or(5);

    let corpus = load_corpus(&a.corpus)?;
    let split = load_split(&a.split, &corpus)?;
    let (trained, log) = match stage_one {
        None => {
            let embeddings = match &a.embeddings {
                Some(path) => load_embeddings(path, corpus.vocab(), config.model.embedding_dim, seed)?,
                None => EmbeddingTable::random(corpus.vocab(), config.model.embedding_dim, seed),
            };
            let outcome = train_main(&corpus, &split, &config, &embeddings, seed)?;
            let trained = TrainedModel {
                config: config.clone(),
                vocab: corpus.vocab().clone(),
                model: outcome.model,
                policy: None,
            };
            (trained, outcome.log)
        }
        Some(prev) => {
            if config.model != prev.config.model {
                return Err(Error::Config(
                    "model settings differ from the stage-one checkpoint".into(),
                ));
            }
            let corpus = corpus.remap(&prev.vocab);
            let outcome = train_policy(&prev.model, &corpus, &split, &config, seed)?;
            let trained = TrainedModel {
                config: config.clone(),
                vocab: prev.vocab,
                model: outcome.model,
                policy: outcome.policy,
            };
            (trained, outcome.log)
        }
    };
    trained.save(&a.out)?;
    if let Some(path) = &a.log {
        let mut w = BufWriter::new(File::create(path)?);
        write_log(&log, &mut w)?;
        w.flush()?;
    }
    log::info!("wrote checkpoint {}", a.out.display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let split = load_split(&a.split, &corpus)?;
    let classes = split.partition(a.partition).to_vec();
    let templated = a.checkpoint.contains("{seed}");
    let seeds = if !a.seeds.is_empty() {
        a.seeds.clone()
    } else if templated {
        return Err(Error::Config("a {seed} checkpoint template needs --seeds".into()));
    } else {
        let trained = TrainedModel::load(&a.checkpoint)?;
        resolve_config(&trained.config, &a.common)?.seeds
    };
    if seeds.is_empty() {
        return Err(Error::Config("no evaluation seeds".into()));
    }
    let mut dump = match &a.dump_episodes {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    let mut runs = Vec::with_capacity(seeds.len());
    let mut echo = None;
    for &seed in &seeds {
        let trained = TrainedModel::load(a.checkpoint.replace("{seed}", &seed.to_string()))?;
        let config = resolve_config(&trained.config, &a.common)?;
        if config.model != trained.config.model {
            return Err(Error::Config("model settings cannot change at evaluation".into()));
        }
        config.validate()?;
        let mode = match a.threshold {
            ThresholdKind::Static => ThresholdMode::Static {
                tau: a.tau.unwrap_or_else(|| config.static_tau()),
            },
            ThresholdKind::Dynamic => ThresholdMode::Dynamic,
        };
        let corpus = corpus.remap(&trained.vocab);
        let episodes = a.episodes.unwrap_or(config.test_episodes);
        let tasks = EpisodeSampler::new(&corpus, &classes, config.shape(), seed).take(episodes)?;
        if let Some(w) = dump.as_mut() {
            dump_episodes(&tasks, &mut *w)?;
        }
        let summary = evaluate_tasks(&tasks, &trained.model, trained.policy.as_ref(), &config, mode)?;
        println!(
            "seed {seed}: AUC {:.4} macro-F1 {:.4}",
            summary.mean_auc, summary.mean_macro_f1
        );
        runs.push((seed, summary));
        echo.get_or_insert((config, mode));
    }
    if let Some(mut w) = dump {
        w.flush()?;
    }
    let (config, mode) = echo.expect("at least one seed");
    let partition = format!("{:?}", a.partition).to_lowercase();
    let report = Report::new(&partition, mode, &config, runs);
    println!(
        "mean over {} seeds: AUC {:.4} ± {:.4}, macro-F1 {:.4} ± {:.4}",
        report.runs.len(),
        report.summary.mean_auc,
        report.summary.std_auc,
        report.summary.mean_macro_f1,
        report.summary.std_macro_f1
    );
    let mut w = BufWriter::new(File::create(&a.report)?);
    serde_json::to_writer_pretty(&mut w, &report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn export_vectors(a: &ExportArgs) -> Result<()> {
    let trained = TrainedModel::load(&a.checkpoint)?;
    let config = resolve_config(&trained.config, &a.common)?;
    config.validate()?;
    let corpus = load_corpus(&a.corpus)?;
    let split = load_split(&a.split, &corpus)?;
    let corpus = corpus.remap(&trained.vocab);
    let tasks = EpisodeSampler::new(&corpus, split.partition(a.partition), config.shape(), a.seed)
        .take(a.episodes)?;
    let file = BufWriter::new(File::create(&a.out)?);
    export_vectors_csv(&tasks, &trained.model, &config, file)?;
    log::info!("wrote vectors of {} episodes to {}", tasks.len(), a.out.display());
    Ok(())
}
