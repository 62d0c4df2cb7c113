//! Episode evaluation and report files.

use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::episode::{EpisodeSampler, MetaTask};
use crate::error::{Error, Result};
use crate::metrics::{mean, std_dev, EpisodeReport, EvalSummary, ThresholdMode};
use crate::model::{forward_episode, ModelParams};
use std::io::Write;
use crate::tensor::softmax_t;
use crate::threshold::{build_state, policy_params_for, state_len, PolicyParams};
use crate::training::TrainConfig;

/// Pooling used for AUC: all (query, class) pairs of an episode together,
/// then averaged over episodes.
pub const AUC_VARIANT: &str = "pooled-per-episode";

fn check_policy<'a>(
    policy: Option<&'a PolicyParams>,
    model: &ModelParams,
    config: &TrainConfig,
) -> Result<&'a PolicyParams> {
    if config.ablation.no_dt {
        return Err(Error::Config("dynamic thresholds requested with the no-dt ablation".into()));
    }
    let policy = policy.ok_or_else(|| {
        Error::Config("dynamic thresholds need a checkpoint with policy parameters".into())
    })?;
    let expected = state_len(config.n_way, model.hidden_dim());
    if policy.state_dim() != expected {
        return Err(Error::Config(format!(
            "policy expects states of length {}, a {}-way episode gives {expected}",
            policy.state_dim(),
            config.n_way
        )));
    }
    Ok(policy)
}

/// Scores one episode. Static thresholds apply to the ranking at
/// `config.temperature`; dynamic thresholds apply the policy's mode to the
/// ranking at `config.policy_temperature`.
pub fn evaluate_episode(
    task: &MetaTask,
    model: &ModelParams,
    policy: Option<&PolicyParams>,
    config: &TrainConfig,
    mode: ThresholdMode,
) -> Result<EpisodeReport> {
    let bound = model.bind_frozen();
    let out = forward_episode(task, &bound, config.model.distance, config.ablation)?;
    let labels: Vec<Vec<bool>> = task.queries.iter().map(|q| q.labels.clone()).collect();
    let mut scores = Vec::with_capacity(task.queries.len());
    let mut thresholds = Vec::with_capacity(task.queries.len());
    match mode {
        ThresholdMode::Static { tau } => {
            for q in 0..task.queries.len() {
                let neg: Vec<f64> = out.distances.row_slice(q).iter().map(|d| -d).collect();
                scores.push(softmax_t(&neg, config.temperature)?);
                thresholds.push(tau);
            }
        }
        ThresholdMode::Dynamic => {
            let policy = check_policy(policy, model, config)?;
            for (q, reps) in out.query_reps.iter().enumerate() {
                let neg: Vec<f64> = out.distances.row_slice(q).iter().map(|d| -d).collect();
                let y = softmax_t(&neg, config.policy_temperature)?;
                let state = build_state(out.prototypes.data(), reps.data(), &y)?;
                thresholds.push(policy_params_for(&state, policy)?.mode()?);
                scores.push(y);
            }
        }
    }
    Ok(EpisodeReport::new(scores, labels, thresholds, mode))
}

pub fn evaluate_tasks(
    tasks: &[MetaTask],
    model: &ModelParams,
    policy: Option<&PolicyParams>,
    config: &TrainConfig,
    mode: ThresholdMode,
) -> Result<EvalSummary> {
    let reports = tasks
        .iter()
        .map(|t| evaluate_episode(t, model, policy, config, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary::from_reports(&reports))
}

/// Samples `episodes` episodes over `classes` with `seed` and averages their metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &ModelParams,
    policy: Option<&PolicyParams>,
    corpus: &Corpus,
    classes: &[String],
    config: &TrainConfig,
    mode: ThresholdMode,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if classes.is_empty() {
        return Err(Error::Config("evaluation partition is empty".into()));
    }
    if let ThresholdMode::Dynamic = mode {
        check_policy(policy, model, config)?;
    }
    let tasks = EpisodeSampler::new(corpus, classes, config.shape(), seed).take(episodes)?;
    evaluate_tasks(&tasks, model, policy, config, mode)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub mean_auc: f64,
    pub mean_macro_f1: f64,
    pub skipped_auc: usize,
    pub episode_auc: Vec<f64>,
    pub episode_macro_f1: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean_auc: f64,
    pub std_auc: f64,
    pub mean_macro_f1: f64,
    pub std_macro_f1: f64,
}

/// Report file: config echo, per-seed episode metrics, and summary across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub auc_variant: String,
    pub partition: String,
    pub threshold: ThresholdMode,
    pub config: TrainConfig,
    pub runs: Vec<RunReport>,
    pub summary: SummaryStats,
}

impl Report {
    pub fn new(
        partition: &str,
        threshold: ThresholdMode,
        config: &TrainConfig,
        runs: Vec<(u64, EvalSummary)>,
    ) -> Self {
        let runs: Vec<RunReport> = runs
            .into_iter()
            .map(|(seed, s)| RunReport {
                seed,
                mean_auc: s.mean_auc,
                mean_macro_f1: s.mean_macro_f1,
                skipped_auc: s.skipped_auc,
                episode_auc: s.episode_auc,
                episode_macro_f1: s.episode_macro_f1,
            })
            .collect();
        let aucs: Vec<f64> = runs.iter().map(|r| r.mean_auc).collect();
        let f1s: Vec<f64> = runs.iter().map(|r| r.mean_macro_f1).collect();
        Report {
            auc_variant: AUC_VARIANT.into(),
            partition: partition.into(),
            threshold,
            config: config.clone(),
            summary: SummaryStats {
                mean_auc: mean(&aucs),
                std_auc: std_dev(&aucs),
                mean_macro_f1: mean(&f1s),
                std_macro_f1: std_dev(&f1s),
            },
            runs,
        }
    }
}

/// Writes prototypes and prototype-specific query vectors as CSV, one row per
/// vector: `episode,kind,class,query,label,v0,…`. Prototype rows leave
/// `query` and `label` empty; query rows carry the sentence id and whether
/// the query has that class.
pub fn export_vectors_csv<W: Write>(
    tasks: &[MetaTask],
    model: &ModelParams,
    config: &TrainConfig,
    out: W,
) -> Result<()> {
    let bound = model.bind_frozen();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["episode", "kind", "class", "query", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..model.hidden_dim()).map(|j| format!("v{j}")));
    w.write_record(&header).map_err(csv_error)?;
    let mut row = |head: [String; 5], v: &[f64]| {
        let fields = head.into_iter().chain(v.iter().map(f64::to_string));
        w.write_record(fields).map_err(csv_error)
    };
    for (e, task) in tasks.iter().enumerate() {
        let out = forward_episode(task, &bound, config.model.distance, config.ablation)?;
        for (i, class) in task.classes.iter().enumerate() {
            let head = [e.to_string(), "prototype".into(), class.clone(), String::new(), String::new()];
            row(head, out.prototypes.row_slice(i))?;
        }
        for (q, reps) in task.queries.iter().zip(&out.query_reps) {
            for (i, class) in task.classes.iter().enumerate() {
                let label = u8::from(q.labels[i]).to_string();
                row([e.to_string(), "query".into(), class.clone(), q.id.to_string(), label], reps.row_slice(i))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format(format!("csv: {other:?}")),
    }
}
