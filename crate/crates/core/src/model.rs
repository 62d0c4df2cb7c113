//! Encoder, support-set attention, query-set attention and distance ranking.
//!
//! A sentence is embedded and passed through a same-length convolution to get
//! its contextual sequence `H` (n×d). For each episode class the support
//! sequences are averaged word by word into a common aspect vector `v`, which
//! both conditions a generated d×d attention matrix and scores the words of
//! every support sentence. The attended support vectors are averaged into the
//! class prototype. Each query is then attended once per prototype without
//! any learned weights, and the negative distances between prototypes and
//! their prototype-specific query vectors are normalized into a ranking.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingTable;
use crate::episode::MetaTask;
use crate::error::{Error, Result};
use crate::param::{Param, Parameters};
use crate::tensor::{concat_rows, conv1d_same, Tensor};

/// Runtime switches that disable parts of the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Prototype is the mean of per-sentence word means.
    pub no_sa: bool,
    /// Support attention uses the identity instead of the generated matrix.
    pub no_attention_matrix: bool,
    /// Every prototype sees the query's word mean.
    pub no_qa: bool,
    /// Static thresholds instead of the learned policy.
    pub no_dt: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 4] = ["no-sa", "no-wi", "no-qa", "no-dt"];

    pub fn is_full(&self) -> bool {
        *self == Ablation::default()
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Parses a comma-separated list such as `no-qa,no-dt`; `none` or an
    /// empty string gives the full model.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "none" | "full" => {}
                "no-sa" => a.no_sa = true,
                "no-wi" | "no-attention-matrix" => a.no_attention_matrix = true,
                "no-qa" => a.no_qa = true,
                "no-dt" => a.no_dt = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation {other:?}, expected one of {:?}",
                        Ablation::NAMES
                    )))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    /// Convolution window, odd.
    pub window: usize,
    /// How many times the common aspect vector is stacked before the
    /// attention-matrix generator.
    pub repeat: usize,
    pub distance: DistanceKind,
    /// Standard deviation of the normal initializer for non-embedding weights.
    pub init_std: f64,
    /// Keep the embedding table fixed during training.
    pub freeze_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: 50,
            hidden_dim: 50,
            window: 3,
            repeat: 10,
            distance: DistanceKind::Euclidean,
            init_std: 0.1,
            freeze_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window {} must be odd", self.window)));
        }
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.repeat == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable arrays of the main network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// vocabulary × embedding_dim
    pub embeddings: Param,
    /// `[window, embedding_dim, hidden_dim]`
    pub conv_kernel: Param,
    /// 1 × hidden_dim
    pub conv_bias: Param,
    /// hidden_dim × repeat
    pub sa_weight: Param,
    /// 1 × hidden_dim
    pub sa_bias: Param,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, embeddings: &EmbeddingTable, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.dim != config.embedding_dim {
            return Err(Error::Config(format!(
                "embedding width {} does not match configured {}",
                embeddings.dim, config.embedding_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, de, d, e) = (
            config.window,
            config.embedding_dim,
            config.hidden_dim,
            config.repeat,
        );
        let std = config.init_std;
        Ok(ModelParams {
            embeddings: embeddings.matrix.clone(),
            conv_kernel: Param::normal(vec![m, de, d], std, &mut rng),
            conv_bias: Param::normal(vec![1, d], std, &mut rng),
            sa_weight: Param::normal(vec![d, e], std, &mut rng),
            sa_bias: Param::normal(vec![1, d], std, &mut rng),
        })
    }

    pub fn bind(&self) -> BoundModel {
        self.bind_with(true)
    }

    /// Like [`bind`](Self::bind), with the embedding table left as a
    /// constant when `train_embeddings` is false.
    pub fn bind_with(&self, train_embeddings: bool) -> BoundModel {
        let embeddings = if train_embeddings {
            self.embeddings.bind()
        } else {
            Tensor::new(self.embeddings.shape.clone(), self.embeddings.data.clone())
                .expect("consistent param")
        };
        BoundModel {
            embeddings,
            conv_kernel: self.conv_kernel.bind(),
            conv_bias: self.conv_bias.bind(),
            sa_weight: self.sa_weight.bind(),
            sa_bias: self.sa_bias.bind(),
        }
    }

    /// Binds the parameters as constants, for gradient-free evaluation.
    pub fn bind_frozen(&self) -> BoundModel {
        let c = |p: &Param| Tensor::new(p.shape.clone(), p.data.clone()).expect("consistent param");
        BoundModel {
            embeddings: c(&self.embeddings),
            conv_kernel: c(&self.conv_kernel),
            conv_bias: c(&self.conv_bias),
            sa_weight: c(&self.sa_weight),
            sa_bias: c(&self.sa_bias),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.conv_bias.shape[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.shape[0]
    }

    /// Rebuilds parameters from named arrays, checking every shape.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Param)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Param> {
            let i = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            Ok(named.swap_remove(i).1)
        };
        let p = ModelParams {
            embeddings: take("embeddings")?,
            conv_kernel: take("conv_kernel")?,
            conv_bias: take("conv_bias")?,
            sa_weight: take("sa_weight")?,
            sa_bias: take("sa_bias")?,
        };
        let (m, de, d, e) = (config.window, config.embedding_dim, config.hidden_dim, config.repeat);
        let expect = [
            ("embeddings", vec![p.embeddings.shape[0], de], &p.embeddings),
            ("conv_kernel", vec![m, de, d], &p.conv_kernel),
            ("conv_bias", vec![1, d], &p.conv_bias),
            ("sa_weight", vec![d, e], &p.sa_weight),
            ("sa_bias", vec![1, d], &p.sa_bias),
        ];
        for (name, shape, param) in expect {
            if param.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    param.shape
                )));
            }
        }
        Ok(p)
    }
}

impl Parameters for ModelParams {
    fn named_params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("embeddings", &self.embeddings),
            ("conv_kernel", &self.conv_kernel),
            ("conv_bias", &self.conv_bias),
            ("sa_weight", &self.sa_weight),
            ("sa_bias", &self.sa_bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("embeddings", &mut self.embeddings),
            ("conv_kernel", &mut self.conv_kernel),
            ("conv_bias", &mut self.conv_bias),
            ("sa_weight", &mut self.sa_weight),
            ("sa_bias", &mut self.sa_bias),
        ]
    }
}

/// Parameters bound into graph leaves for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub embeddings: Tensor,
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    pub sa_weight: Tensor,
    pub sa_bias: Tensor,
}

impl BoundModel {
    /// Leaves in the same order as [`Parameters::named_params`].
    pub fn leaves(&self) -> Vec<Tensor> {
        vec![
            self.embeddings.clone(),
            self.conv_kernel.clone(),
            self.conv_bias.clone(),
            self.sa_weight.clone(),
            self.sa_bias.clone(),
        ]
    }

    pub fn repeat(&self) -> usize {
        self.sa_weight.cols()
    }
}

/// Contextual sequence H (n×d) of a tokenized sentence.
pub fn encode(tokens: &[usize], model: &BoundModel) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::Contract("cannot encode an empty sentence".into()));
    }
    let embedded = model.embeddings.gather_rows(tokens)?;
    conv1d_same(&embedded, &model.conv_kernel, &model.conv_bias)
}

/// Word-level mean over all rows of all K encoded sequences (1×d).
pub fn common_aspect_vector(encoded: &[Tensor]) -> Result<Tensor> {
    if encoded.is_empty() {
        return Err(Error::Contract("common aspect vector of zero sequences".into()));
    }
    concat_rows(encoded)?.mean_axis(0)
}

/// W · [v; v; …; v] + b, with `v` stacked `repeat` times as rows and `b`
/// added to every row of the d×d product.
pub fn class_attention_matrix(v: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let repeat = weight.cols();
    let stacked = concat_rows(&vec![v.clone(); repeat])?;
    weight.matmul(&stacked)?.add_row(bias)
}

/// Support-set attention over one instance. Returns the word weights β (1×n)
/// and the denoised vector β·H (1×d). With `attention_matrix = None` the
/// identity stands in for Wⁱ.
pub fn denoise_instance(h: &Tensor, v: &Tensor, attention_matrix: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let projected = match attention_matrix {
        Some(w) => h.matmul(w)?,
        None => h.clone(),
    };
    let scores = v.matmul(&projected.tanh().transpose()?)?;
    let beta = scores.softmax_rows(1.0)?;
    let r = beta.matmul(h)?;
    Ok((beta, r))
}

/// Mean of the K denoised vectors (each 1×d).
pub fn compute_prototype(denoised: &[Tensor]) -> Result<Tensor> {
    if denoised.is_empty() {
        return Err(Error::Contract("prototype of zero instances".into()));
    }
    concat_rows(denoised)?.mean_axis(0)
}

/// Query-set attention for all prototypes at once. `prototypes` is N×d;
/// returns the attention weights ρ (N×n) and the prototype-specific query
/// vectors (N×d). Row i depends only on prototype i.
pub fn query_representations(h_q: &Tensor, prototypes: &Tensor) -> Result<(Tensor, Tensor)> {
    let scores = prototypes.matmul(&h_q.tanh().transpose()?)?;
    let rho = scores.softmax_rows(1.0)?;
    let reps = rho.matmul(h_q)?;
    Ok((rho, reps))
}

/// Distances between matching rows of two N×d matrices, as a 1×N row.
pub fn distances(prototypes: &Tensor, query_reps: &Tensor, kind: DistanceKind) -> Result<Tensor> {
    let sq = prototypes.sub(query_reps)?.square().sum_axis(1)?;
    let d = match kind {
        DistanceKind::Euclidean => sq.sqrt()?,
        DistanceKind::SquaredEuclidean => sq,
    };
    d.transpose()
}

/// softmax(−distance / T) over the N classes (1×N).
pub fn rank(prototypes: &Tensor, query_reps: &Tensor, temperature: f64, kind: DistanceKind) -> Result<Tensor> {
    distances(prototypes, query_reps, kind)?.neg().softmax_rows(temperature)
}

/// Graph outputs of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    /// N×d, rows in episode class order.
    pub prototypes: Tensor,
    /// Per query, N×d prototype-specific representations.
    pub query_reps: Vec<Tensor>,
    /// Q×N distances.
    pub distances: Tensor,
    /// Per class, per support instance, the word weights β.
    pub support_attention: Vec<Vec<Vec<f64>>>,
    /// Per query, N×n weights ρ.
    pub query_attention: Vec<Tensor>,
}

impl EpisodeOutput {
    /// Q×N ranking scores at a temperature.
    pub fn scores(&self, temperature: f64) -> Result<Tensor> {
        self.distances.neg().softmax_rows(temperature)
    }
}

pub fn forward_episode(
    task: &MetaTask,
    model: &BoundModel,
    distance: DistanceKind,
    ablation: Ablation,
) -> Result<EpisodeOutput> {
    if task.queries.is_empty() {
        return Err(Error::Contract("episode has no queries".into()));
    }
    let mut prototypes = Vec::with_capacity(task.n_way());
    let mut support_attention = Vec::with_capacity(task.n_way());
    for group in &task.support {
        let encoded = group
            .iter()
            .map(|s| encode(&s.tokens, model))
            .collect::<Result<Vec<_>>>()?;
        if ablation.no_sa {
            let means = encoded
                .iter()
                .map(|h| h.mean_axis(0))
                .collect::<Result<Vec<_>>>()?;
            prototypes.push(compute_prototype(&means)?);
            support_attention.push(Vec::new());
            continue;
        }
        let v = common_aspect_vector(&encoded)?;
        let w_i = if ablation.no_attention_matrix {
            None
        } else {
            Some(class_attention_matrix(&v, &model.sa_weight, &model.sa_bias)?)
        };
        let mut denoised = Vec::with_capacity(encoded.len());
        let mut weights = Vec::with_capacity(encoded.len());
        for h in &encoded {
            let (beta, r) = denoise_instance(h, &v, w_i.as_ref())?;
            weights.push(beta.data().to_vec());
            denoised.push(r);
        }
        prototypes.push(compute_prototype(&denoised)?);
        support_attention.push(weights);
    }
    let prototypes = concat_rows(&prototypes)?;
    let n = task.n_way();

    let mut query_reps = Vec::with_capacity(task.queries.len());
    let mut query_attention = Vec::with_capacity(task.queries.len());
    let mut rows = Vec::with_capacity(task.queries.len());
    for q in &task.queries {
        let h_q = encode(&q.sentence.tokens, model)?;
        let (rho, reps) = if ablation.no_qa {
            let mean = h_q.mean_axis(0)?;
            let len = h_q.rows();
            let rho = Tensor::new(vec![n, len], vec![1.0 / len as f64; n * len])?;
            (rho, concat_rows(&vec![mean; n])?)
        } else {
            query_representations(&h_q, &prototypes)?
        };
        rows.push(distances(&prototypes, &reps, distance)?);
        query_reps.push(reps);
        query_attention.push(rho);
    }
    Ok(EpisodeOutput {
        prototypes,
        query_reps,
        distances: concat_rows(&rows)?,
        support_attention,
        query_attention,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sentence, Vocabulary};

    fn toy_model(vocab: usize, de: usize, d: usize, window: usize, repeat: usize, seed: u64) -> ModelParams {
        let config = ModelConfig {
            embedding_dim: de,
            hidden_dim: d,
            window,
            repeat,
            ..Default::default()
        };
        let mut v = Vocabulary::new();
        for i in 1..vocab {
            v.insert(&format!("t{i}"));
        }
        let table = EmbeddingTable::random(&v, de, seed);
        ModelParams::init(&config, &table, seed + 1).unwrap()
    }

    #[test]
    fn one_word_sentence_encodes_to_one_row() {
        let p = toy_model(5, 3, 4, 3, 2, 0);
        let h = encode(&[2], &p.bind()).unwrap();
        assert_eq!(h.shape(), &[1, 4]);
    }

    #[test]
    fn zero_kernel_encodes_to_bias() {
        let mut p = toy_model(5, 3, 4, 3, 2, 0);
        p.conv_kernel.data.iter_mut().for_each(|x| *x = 0.0);
        let h = encode(&[1, 2, 3], &p.bind()).unwrap();
        for i in 0..3 {
            assert_eq!(h.row_slice(i), p.conv_bias.data.as_slice());
        }
    }

    #[test]
    fn identity_encoder() {
        let mut p = toy_model(4, 2, 2, 1, 1, 0);
        p.conv_kernel.data = vec![1.0, 0.0, 0.0, 1.0];
        p.conv_bias.data = vec![0.0, 0.0];
        let h = encode(&[3, 1], &p.bind()).unwrap();
        assert_eq!(h.row_slice(0), &p.embeddings.data[6..8]);
        assert_eq!(h.row_slice(1), &p.embeddings.data[2..4]);
    }

    #[test]
    fn out_of_range_token() {
        let p = toy_model(4, 2, 2, 1, 1, 0);
        assert!(matches!(encode(&[4], &p.bind()), Err(Error::Lookup(_))));
    }

    #[test]
    fn common_vector_of_two_single_words() {
        let u = Tensor::row(&[1.0, 2.0]);
        let w = Tensor::row(&[3.0, -2.0]);
        let v = common_aspect_vector(&[u, w]).unwrap();
        assert_eq!(v.data(), &[2.0, 0.0]);
    }

    #[test]
    fn zero_generator_weight_gives_bias_rows() {
        let v = Tensor::row(&[0.3, -0.2, 0.9]);
        let w = Tensor::zeros(vec![3, 4]);
        let b = Tensor::row(&[1.0, 2.0, 3.0]);
        let m = class_attention_matrix(&v, &w, &b).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        for i in 0..3 {
            assert_eq!(m.row_slice(i), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn ones_column_generator() {
        let v = Tensor::row(&[0.3, -0.2]);
        let w = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::row(&[0.5, 0.25]);
        let m = class_attention_matrix(&v, &w, &b).unwrap();
        for i in 0..2 {
            let row = m.row_slice(i);
            assert!((row[0] - 0.8).abs() < 1e-15 && (row[1] - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn single_word_attention() {
        let h = Tensor::row(&[0.4, -1.0]);
        let v = Tensor::row(&[2.0, 1.0]);
        let w = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (beta, r) = denoise_instance(&h, &v, Some(&w)).unwrap();
        assert_eq!(beta.data(), &[1.0]);
        assert_eq!(r.data(), h.data());
        let (rho, rq) = query_representations(&h, &Tensor::row(&[5.0, -3.0])).unwrap();
        assert_eq!(rho.data(), &[1.0]);
        assert_eq!(rq.data(), h.data());
    }

    #[test]
    fn identical_rows_split_attention_evenly() {
        let h = Tensor::from_rows(&[vec![0.4, -1.0], vec![0.4, -1.0]]).unwrap();
        let v = Tensor::row(&[2.0, 1.0]);
        let w = Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let (beta, r) = denoise_instance(&h, &v, Some(&w)).unwrap();
        assert_eq!(beta.data(), &[0.5, 0.5]);
        assert_eq!(r.data(), &[0.4, -1.0]);
        let (rho, rq) = query_representations(&h, &Tensor::row(&[1.0, 1.0])).unwrap();
        assert_eq!(rho.data(), &[0.5, 0.5]);
        assert_eq!(rq.data(), &[0.4, -1.0]);
    }

    #[test]
    fn prototype_is_mean() {
        let u = Tensor::row(&[1.0, 4.0]);
        let w = Tensor::row(&[3.0, 0.0]);
        assert_eq!(compute_prototype(std::slice::from_ref(&u)).unwrap().data(), u.data());
        assert_eq!(compute_prototype(&[u.clone(), w.clone()]).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(
            compute_prototype(&[w, u]).unwrap().data(),
            &[2.0, 2.0]
        );
    }

    #[test]
    fn rank_two_way_example() {
        let protos = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let reps = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let y = rank(&protos, &reps, 1.0, DistanceKind::Euclidean).unwrap();
        assert!((y.data()[0] - 0.80443).abs() < 1e-5);
        assert!((y.data()[1] - 0.19557).abs() < 1e-5);
    }

    #[test]
    fn rank_equal_distances_uniform_and_high_temperature() {
        let protos = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let reps = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let y = rank(&protos, &reps, 1.0, DistanceKind::Euclidean).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let far = Tensor::from_rows(&[vec![9.0, 0.0], vec![0.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let y = rank(&far, &reps, 1e6, DistanceKind::Euclidean).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn ablation_parsing() {
        assert!("".parse::<Ablation>().unwrap().is_full());
        let a: Ablation = "no-qa, no-dt".parse().unwrap();
        assert!(a.no_qa && a.no_dt && !a.no_sa);
        assert!("no-xyz".parse::<Ablation>().is_err());
    }

    #[test]
    fn every_ablation_gives_n_probabilities_per_query() {
        let p = toy_model(12, 4, 5, 3, 3, 3);
        let s = |toks: &[usize], a: &str| Sentence {
            tokens: toks.to_vec(),
            aspects: vec![a.to_string()],
        };
        let task = MetaTask::from_parts(
            vec!["a".into(), "b".into(), "c".into()],
            vec![
                vec![s(&[1, 2], "a"), s(&[3, 4, 5], "a")],
                vec![s(&[6], "b"), s(&[7, 8], "b")],
                vec![s(&[9, 10, 11], "c"), s(&[9], "c")],
            ],
            vec![s(&[1, 9], "a"), s(&[7], "b")],
        )
        .unwrap();
        for flags in ["", "no-sa", "no-wi", "no-qa", "no-sa,no-qa,no-wi"] {
            let ab: Ablation = flags.parse().unwrap();
            let out = forward_episode(&task, &p.bind(), DistanceKind::Euclidean, ab).unwrap();
            let y = out.scores(1.0).unwrap();
            assert_eq!(y.shape(), &[2, 3], "{flags}");
            for q in 0..2 {
                let s: f64 = y.row_slice(q).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
