//! Episodic training: the MSE ranking objective, Adam, early stopping, and
//! the two training stages (main network, then joint training with the
//! threshold policy).

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ClassSplit, Corpus, EmbeddingTable, Vocabulary};
use crate::episode::{sample_episode, EpisodeSampler, EpisodeShape, MetaTask};
use crate::error::{Error, Result};
use crate::eval::evaluate_tasks;
use crate::metrics::{instance_f1, ThresholdMode, apply_threshold};
use crate::model::{forward_episode, Ablation, EpisodeOutput, ModelConfig, ModelParams};
use crate::param::{collect_grads, Parameters};
use crate::tensor::{softmax_t, Tensor};
use crate::threshold::{
    beta_log_prob, beta_mode, build_state, policy_forward, sample_threshold, state_len,
    BetaParams, PolicyParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    /// Main network, first stage.
    pub learning_rate: f64,
    /// Policy network during joint training.
    pub policy_learning_rate: f64,
    /// Main network during joint training.
    pub joint_learning_rate: f64,
    /// Standard deviation of the normal initializer for policy weights.
    pub policy_init_std: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    /// Ranking temperature for the MSE objective and static thresholds.
    pub temperature: f64,
    /// Ranking temperature seen by the threshold policy.
    pub policy_temperature: f64,
    /// Static threshold; `None` picks 0.3 below 10 ways and 0.2 from 10 ways.
    pub static_threshold: Option<f64>,
    pub model: ModelConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 5,
            k_shot: 5,
            queries_per_class: 5,
            episodes_per_epoch: 800,
            val_episodes: 600,
            test_episodes: 600,
            learning_rate: 1e-3,
            policy_learning_rate: 1e-4,
            joint_learning_rate: 1e-4,
            policy_init_std: 0.01,
            patience: 3,
            max_epochs: 50,
            seeds: vec![5, 10, 15, 20, 25],
            temperature: 1.0,
            policy_temperature: 2.0,
            static_threshold: None,
            model: ModelConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

pub fn default_static_threshold(n_way: usize) -> f64 {
    if n_way >= 10 {
        0.2
    } else {
        0.3
    }
}

impl TrainConfig {
    pub fn shape(&self) -> EpisodeShape {
        EpisodeShape::new(self.n_way, self.k_shot, self.queries_per_class)
    }

    pub fn static_tau(&self) -> f64 {
        self.static_threshold
            .unwrap_or_else(|| default_static_threshold(self.n_way))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_way", self.n_way),
            ("k_shot", self.k_shot),
            ("queries_per_class", self.queries_per_class),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("val_episodes", self.val_episodes),
            ("test_episodes", self.test_episodes),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("policy_learning_rate", self.policy_learning_rate),
            ("joint_learning_rate", self.joint_learning_rate),
            ("policy_init_std", self.policy_init_std),
            ("temperature", self.temperature),
            ("policy_temperature", self.policy_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.static_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("static threshold {t} outside [0, 1]")));
            }
        }
        self.model.validate()
    }
}

/// Independent seed for a named random stream of one run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_VAL: u64 = 3;
const STREAM_POLICY_INIT: u64 = 4;
const STREAM_POLICY_SAMPLE: u64 = 5;

/// Label vector divided by its number of positives.
pub fn normalized_target(labels: &[bool]) -> Result<Vec<f64>> {
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::Contract("label vector has no positive class".into()));
    }
    Ok(labels
        .iter()
        .map(|&l| if l { 1.0 / pos as f64 } else { 0.0 })
        .collect())
}

/// Σ_i (ŷ_i − ỹ_i)² for one query, ỹ the normalized labels.
pub fn mse_loss_value(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("mse_loss", "scores and labels differ in length"));
    }
    let target = normalized_target(labels)?;
    Ok(scores.iter().zip(&target).map(|(y, t)| (y - t).powi(2)).sum())
}

/// Differentiable MSE summed over all queries; `scores` is Q×N.
pub fn mse_loss(scores: &Tensor, labels: &[Vec<bool>]) -> Result<Tensor> {
    if scores.rows() != labels.len() {
        return Err(Error::shape(
            "mse_loss",
            format!("{} score rows for {} label vectors", scores.rows(), labels.len()),
        ));
    }
    let mut target = Vec::with_capacity(scores.numel());
    for l in labels {
        if l.len() != scores.cols() {
            return Err(Error::shape("mse_loss", "label width differs from score width"));
        }
        target.extend(normalized_target(l)?);
    }
    let target = Tensor::new(scores.shape().to_vec(), target)?;
    Ok(scores.sub(&target)?.square().sum())
}

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update. Gradients are checked for finiteness before any
    /// parameter is touched.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &[Vec<f64>]) -> Result<()> {
        let mut named = params.named_params_mut();
        if named.len() != grads.len() {
            return Err(Error::shape(
                "adam",
                format!("{} parameters, {} gradients", named.len(), grads.len()),
            ));
        }
        for ((name, p), g) in named.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::shape(
                    "adam",
                    format!("{name}: {} values, {} gradient entries", p.len(), g.len()),
                ));
            }
            if let Some((i, x)) = g.iter().enumerate().find(|(_, x)| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {x} at {name}[{i}] (step {})",
                    self.step + 1
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in named.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p.data[j] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Progress {
    Improved,
    Stalled,
    Stop,
}

/// Stops once `patience` consecutive epochs fail to beat the best metric.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stalled: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            stalled: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> Progress {
        match self.best {
            Some((_, best)) if !(metric > best) => {
                self.stalled += 1;
                if self.stalled >= self.patience {
                    Progress::Stop
                } else {
                    Progress::Stalled
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stalled = 0;
                Progress::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_metric(&self) -> Option<f64> {
        self.best.map(|(_, m)| m)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Mean per-episode MSE.
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_loss: Option<f64>,
    pub val_auc: f64,
    /// Under the stage's threshold mode (static in stage one, dynamic in stage two).
    pub val_macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_macro_f1_static: Option<f64>,
}

pub fn write_log<W: std::io::Write>(log: &[EpochLog], mut out: W) -> Result<()> {
    for e in log {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Episode MSE loss and the graph outputs it came from.
pub fn episode_loss(
    task: &MetaTask,
    model: &ModelParams,
    config: &TrainConfig,
) -> Result<(Tensor, EpisodeOutput, crate::model::BoundModel)> {
    let bound = model.bind_with(!config.model.freeze_embeddings);
    let out = forward_episode(task, &bound, config.model.distance, config.ablation)?;
    let labels: Vec<Vec<bool>> = task.queries.iter().map(|q| q.labels.clone()).collect();
    let loss = mse_loss(&out.scores(config.temperature)?, &labels)?;
    Ok((loss, out, bound))
}

fn check_finite(loss: f64, stage: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{stage} loss became {loss} in epoch {epoch}")))
    }
}

/// A trained model plus everything needed to reuse it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: ModelParams,
    pub policy: Option<PolicyParams>,
}

impl TrainedModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut arrays: Vec<_> = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("model.{n}"), p.clone()))
            .collect();
        if let Some(policy) = &self.policy {
            arrays.extend(
                policy
                    .named_params()
                    .into_iter()
                    .map(|(n, p)| (format!("policy.{n}"), p.clone())),
            );
        }
        Ok(Checkpoint {
            config: serde_json::to_value(&self.config)?,
            vocabulary: self.vocab.tokens().to_vec(),
            arrays,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ckpt.config.clone())?;
        let vocab = Vocabulary::from_tokens(ckpt.vocabulary.clone())?;
        let model = ModelParams::from_named(&config.model, ckpt.namespace("model"))?;
        if model.vocab_size() != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "{} embedding rows for {} vocabulary entries",
                model.vocab_size(),
                vocab.len()
            )));
        }
        let policy = if ckpt.has_namespace("policy") {
            Some(PolicyParams::from_named(ckpt.namespace("policy"))?)
        } else {
            None
        };
        Ok(TrainedModel {
            config,
            vocab,
            model,
            policy,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub model: ModelParams,
    pub policy: Option<PolicyParams>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn validation_tasks(corpus: &Corpus, split: &ClassSplit, config: &TrainConfig, seed: u64) -> Result<Vec<MetaTask>> {
    EpisodeSampler::new(corpus, &split.val, config.shape(), sub_seed(seed, STREAM_VAL))
        .take(config.val_episodes)
}

/// First stage: optimizes the summed per-query MSE with one Adam step per
/// episode, selecting the epoch with the best mean validation AUC.
pub fn train_main(
    corpus: &Corpus,
    split: &ClassSplit,
    config: &TrainConfig,
    embeddings: &EmbeddingTable,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    split.validate(corpus)?;
    let mut model = ModelParams::init(&config.model, embeddings, sub_seed(seed, STREAM_INIT))?;
    if model.vocab_size() != corpus.vocab().len() {
        return Err(Error::Config(format!(
            "embedding table has {} rows, corpus vocabulary {}",
            model.vocab_size(),
            corpus.vocab().len()
        )));
    }
    let val = validation_tasks(corpus, split, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_TRAIN));
    let mut adam = Adam::new(config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let static_mode = ThresholdMode::Static {
        tau: config.static_tau(),
    };

    for epoch in 1..=config.max_epochs {
        let mut total = 0.0;
        for _ in 0..config.episodes_per_epoch {
            let task = sample_episode(corpus, &split.train, config.shape(), &mut rng)?;
            let (loss, _, bound) = episode_loss(&task, &model, config)?;
            let value = loss.item()?;
            check_finite(value, "main", epoch)?;
            loss.backward()?;
            adam.step(&mut model, &collect_grads(&bound.leaves()))?;
            total += value;
        }
        let summary = evaluate_tasks(&val, &model, None, config, static_mode)?;
        let entry = EpochLog {
            stage: "main".into(),
            epoch,
            train_loss: total / config.episodes_per_epoch as f64,
            policy_loss: None,
            val_auc: summary.mean_auc,
            val_macro_f1: summary.mean_macro_f1,
            val_macro_f1_static: None,
        };
        log::info!(
            "main epoch {epoch}: loss {:.4} val auc {:.4} f1 {:.4}",
            entry.train_loss,
            entry.val_auc,
            entry.val_macro_f1
        );
        log.push(entry);
        match stopper.observe(epoch, summary.mean_auc) {
            Progress::Improved => best = model.clone(),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    Ok(TrainOutcome {
        model: best,
        policy: None,
        log,
        best_epoch: stopper.best_epoch().unwrap_or(0),
    })
}

/// Per-query quantities of one policy-gradient step.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStep {
    pub beta: Vec<BetaParams>,
    pub sampled: Vec<f64>,
    pub score: Vec<f64>,
    pub baseline_score: Vec<f64>,
}

/// Builds the summed policy objective Σ −(score − score*) log P(τ) over an
/// episode's queries. States are treated as constants.
pub fn policy_objective<R: rand::Rng + ?Sized>(
    out: &EpisodeOutput,
    task: &MetaTask,
    policy: &crate::threshold::BoundPolicy,
    policy_temperature: f64,
    rng: &mut R,
) -> Result<(Tensor, PolicyStep)> {
    let protos = out.prototypes.data();
    let mut states = Vec::new();
    let mut scores = Vec::with_capacity(task.queries.len());
    for (q, reps) in out.query_reps.iter().enumerate() {
        let neg: Vec<f64> = out.distances.row_slice(q).iter().map(|d| -d).collect();
        let y = softmax_t(&neg, policy_temperature)?;
        states.extend(build_state(protos, reps.data(), &y)?);
        scores.push(y);
    }
    let rows = task.queries.len();
    let states = Tensor::new(vec![rows, states.len() / rows], states)?;
    let (a, b) = policy_forward(&states, policy)?;

    let mut step = PolicyStep {
        beta: Vec::with_capacity(rows),
        sampled: Vec::with_capacity(rows),
        score: Vec::with_capacity(rows),
        baseline_score: Vec::with_capacity(rows),
    };
    for (i, (q, y)) in task.queries.iter().zip(&scores).enumerate() {
        let params = BetaParams {
            a: a.data()[i],
            b: b.data()[i],
        };
        let tau = sample_threshold(params, rng)?;
        let mode = beta_mode(params.a, params.b)?;
        step.score.push(instance_f1(&apply_threshold(y, tau), &q.labels));
        step.baseline_score.push(instance_f1(&apply_threshold(y, mode), &q.labels));
        step.sampled.push(tau);
        step.beta.push(params);
    }
    let log_p = beta_log_prob(&a, &b, &step.sampled)?;
    let neg_adv: Vec<f64> = step
        .score
        .iter()
        .zip(&step.baseline_score)
        .map(|(s, s_star)| -(s - s_star))
        .collect();
    let loss = Tensor::new(vec![rows, 1], neg_adv)?.mul(&log_p)?.sum();
    Ok((loss, step))
}

/// Second stage: starts from a trained main network and jointly trains it
/// (same MSE objective, joint learning rate) with a freshly initialized
/// threshold policy. Selects the epoch with the best validation macro-F1
/// under dynamic thresholds.
pub fn train_policy(
    stage_one: &ModelParams,
    corpus: &Corpus,
    split: &ClassSplit,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    split.validate(corpus)?;
    if config.ablation.no_dt {
        return Err(Error::Config("policy training with the no-dt ablation".into()));
    }
    let mut model = stage_one.clone();
    let hidden = model.hidden_dim();
    let mut policy = PolicyParams::init(
        state_len(config.n_way, hidden),
        hidden,
        config.policy_init_std,
        sub_seed(seed, STREAM_POLICY_INIT),
    );
    let val = validation_tasks(corpus, split, config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_TRAIN));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, STREAM_POLICY_SAMPLE));
    let mut model_adam = Adam::new(config.joint_learning_rate);
    let mut policy_adam = Adam::new(config.policy_learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = (model.clone(), policy.clone());
    let mut log = Vec::new();
    let static_mode = ThresholdMode::Static {
        tau: config.static_tau(),
    };

    for epoch in 1..=config.max_epochs {
        let (mut main_total, mut policy_total) = (0.0, 0.0);
        for _ in 0..config.episodes_per_epoch {
            let task = sample_episode(corpus, &split.train, config.shape(), &mut rng)?;
            let (main_loss, out, bound) = episode_loss(&task, &model, config)?;
            let bound_policy = policy.bind();
            let (policy_loss, _) =
                policy_objective(&out, &task, &bound_policy, config.policy_temperature, &mut sample_rng)?;
            let (mv, pv) = (main_loss.item()?, policy_loss.item()?);
            check_finite(mv, "main", epoch)?;
            check_finite(pv, "policy", epoch)?;
            main_loss.add(&policy_loss)?.backward()?;
            model_adam.step(&mut model, &collect_grads(&bound.leaves()))?;
            policy_adam.step(&mut policy, &collect_grads(&bound_policy.leaves()))?;
            main_total += mv;
            policy_total += pv;
        }
        let dynamic = evaluate_tasks(&val, &model, Some(&policy), config, ThresholdMode::Dynamic)?;
        let fixed = evaluate_tasks(&val, &model, None, config, static_mode)?;
        let episodes = config.episodes_per_epoch as f64;
        let entry = EpochLog {
            stage: "dt".into(),
            epoch,
            train_loss: main_total / episodes,
            policy_loss: Some(policy_total / episodes),
            val_auc: fixed.mean_auc,
            val_macro_f1: dynamic.mean_macro_f1,
            val_macro_f1_static: Some(fixed.mean_macro_f1),
        };
        log::info!(
            "dt epoch {epoch}: loss {:.4} policy {:.4} val auc {:.4} f1 dynamic {:.4} static {:.4}",
            entry.train_loss,
            entry.policy_loss.unwrap_or_default(),
            entry.val_auc,
            entry.val_macro_f1,
            fixed.mean_macro_f1
        );
        log.push(entry);
        match stopper.observe(epoch, dynamic.mean_macro_f1) {
            Progress::Improved => best = (model.clone(), policy.clone()),
            Progress::Stalled => {}
            Progress::Stop => break,
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        policy: Some(best.1),
        log,
        best_epoch: stopper.best_epoch().unwrap_or(0),
    })
}
