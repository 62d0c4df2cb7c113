//! Shared helpers for the integration tests: scalar-loop reference
//! implementations, a finite-difference gradient checker and the synthetic
//! benchmark used by the end-to-end runs.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod criteria;
pub mod protocol;

use std::collections::HashMap;

use fewshot_acd::dataset::{
    generate_synthetic, generate_synthetic_embeddings, split_classes, ClassSplit, Corpus,
    EmbeddingTable, Sentence, SplitSpec, SyntheticConfig, SyntheticEmbeddingConfig,
};
use fewshot_acd::episode::MetaTask;
use fewshot_acd::model::{ModelConfig, ModelParams};
use fewshot_acd::param::collect_grads;
use fewshot_acd::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Matrix = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    (0..rows).map(|_| uniform_vec(rng, cols, -1.0, 1.0)).collect()
}

pub fn tensor(m: &Matrix) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn to_matrix(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn max_abs_diff_m(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len(), "row count mismatch");
    a.iter().zip(b).map(|(x, y)| max_abs_diff(x, y)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// finite differences

pub const FD_STEP: f64 = 1e-5;

/// Relative error between an analytic and a numeric derivative. The floor
/// keeps exact zeros from dividing by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between backward and central differences of a
/// scalar function of the given inputs.
pub fn grad_check<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F) -> f64
where
    F: Fn(&[Tensor]) -> fewshot_acd::Result<Tensor>,
{
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s.clone(), d.clone()).unwrap())
        .collect();
    f(&leaves).unwrap().backward().unwrap();
    let analytic = collect_grads(&leaves);

    let eval = |vals: &[(Vec<usize>, Vec<f64>)]| {
        let ts: Vec<Tensor> = vals
            .iter()
            .map(|(s, d)| Tensor::new(s.clone(), d.clone()).unwrap())
            .collect();
        f(&ts).unwrap().item().unwrap()
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for p in 0..inputs.len() {
        for i in 0..inputs[p].1.len() {
            let x = inputs[p].1[i];
            work[p].1[i] = x + FD_STEP;
            let plus = eval(&work);
            work[p].1[i] = x - FD_STEP;
            let minus = eval(&work);
            work[p].1[i] = x;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[p][i], numeric));
        }
    }
    worst
}

/// Reduces a tensor to a scalar with fixed random weights, so every output
/// entry carries a distinct upstream gradient.
pub fn project(t: &Tensor, seed: u64) -> fewshot_acd::Result<Tensor> {
    let mut r = rng(seed);
    let w = Tensor::new(t.shape().to_vec(), uniform_vec(&mut r, t.numel(), -1.0, 1.0))?;
    Ok(t.mul(&w)?.sum())
}

// ---------------------------------------------------------------------------
// scalar-loop references

pub fn oracle_softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e = Vec::with_capacity(scores.len());
    let mut total = 0.0;
    for &s in scores {
        let x = ((s - max) / temperature).exp();
        e.push(x);
        total += x;
    }
    e.iter().map(|x| x / total).collect()
}

/// Same-length convolution with zero padding; `kernel[t][c][j]`.
pub fn oracle_conv(x: &Matrix, kernel: &[Matrix], bias: &[f64]) -> Matrix {
    let n = x.len();
    let m = kernel.len();
    let pad = (m - 1) / 2;
    let d_in = x[0].len();
    let d_out = bias.len();
    let mut out = vec![vec![0.0; d_out]; n];
    for i in 0..n {
        for j in 0..d_out {
            let mut acc = bias[j];
            for t in 0..m {
                let src = i as isize + t as isize - pad as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for c in 0..d_in {
                    acc += x[src as usize][c] * kernel[t][c][j];
                }
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Grand mean over every row of every sequence.
pub fn oracle_common_vector(seqs: &[Matrix]) -> Vec<f64> {
    let d = seqs[0][0].len();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for h in seqs {
        for row in h {
            for c in 0..d {
                sum[c] += row[c];
            }
            count += 1;
        }
    }
    sum.iter().map(|s| s / count as f64).collect()
}

/// W (d×e) times e stacked copies of v, plus b on every row.
pub fn oracle_attention_matrix(v: &[f64], w: &Matrix, b: &[f64]) -> Matrix {
    let d = v.len();
    let e = w[0].len();
    let stacked: Matrix = (0..e).map(|_| v.to_vec()).collect();
    let mut out = vec![vec![0.0; d]; d];
    for r in 0..d {
        for c in 0..d {
            let mut acc = 0.0;
            for k in 0..e {
                acc += w[r][k] * stacked[k][c];
            }
            out[r][c] = acc + b[c];
        }
    }
    out
}

/// Word weights and weighted sum for one support instance. `wi = None`
/// stands for the identity.
pub fn oracle_denoise(h: &Matrix, v: &[f64], wi: Option<&Matrix>) -> (Vec<f64>, Vec<f64>) {
    let n = h.len();
    let d = v.len();
    let mut scores = vec![0.0; n];
    for j in 0..n {
        let mut s = 0.0;
        for c in 0..d {
            let proj = match wi {
                Some(w) => (0..d).map(|k| h[j][k] * w[k][c]).sum::<f64>(),
                None => h[j][c],
            };
            s += v[c] * proj.tanh();
        }
        scores[j] = s;
    }
    let beta = oracle_softmax(&scores, 1.0);
    let mut r = vec![0.0; d];
    for j in 0..n {
        for c in 0..d {
            r[c] += beta[j] * h[j][c];
        }
    }
    (beta, r)
}

pub fn oracle_mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut m = vec![0.0; d];
    for r in rows {
        for c in 0..d {
            m[c] += r[c];
        }
    }
    m.iter().map(|x| x / rows.len() as f64).collect()
}

/// Query attention for every prototype: (ρ rows, query vectors).
pub fn oracle_query(hq: &Matrix, prototypes: &Matrix) -> (Matrix, Matrix) {
    let d = hq[0].len();
    let mut rhos = Vec::new();
    let mut reps = Vec::new();
    for p in prototypes {
        let scores: Vec<f64> = hq
            .iter()
            .map(|row| (0..d).map(|c| p[c] * row[c].tanh()).sum())
            .collect();
        let rho = oracle_softmax(&scores, 1.0);
        let mut rep = vec![0.0; d];
        for (j, row) in hq.iter().enumerate() {
            for c in 0..d {
                rep[c] += rho[j] * row[c];
            }
        }
        rhos.push(rho);
        reps.push(rep);
    }
    (rhos, reps)
}

pub fn oracle_distances(prototypes: &Matrix, reps: &Matrix) -> Vec<f64> {
    prototypes
        .iter()
        .zip(reps)
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect()
}

pub fn oracle_rank(distances: &[f64], temperature: f64) -> Vec<f64> {
    let neg: Vec<f64> = distances.iter().map(|d| -d).collect();
    oracle_softmax(&neg, temperature)
}

/// Full forward pass by loops: Q×N distances for an episode.
pub fn oracle_episode_distances(task: &MetaTask, model: &ModelParams) -> Matrix {
    let de = model.embeddings.shape[1];
    let d = model.conv_bias.len();
    let m = model.conv_kernel.shape[0];
    let e = model.sa_weight.shape[1];
    let kernel: Vec<Matrix> = (0..m)
        .map(|t| {
            (0..de)
                .map(|c| (0..d).map(|j| model.conv_kernel.data[(t * de + c) * d + j]).collect())
                .collect()
        })
        .collect();
    let w: Matrix = (0..d).map(|r| model.sa_weight.data[r * e..(r + 1) * e].to_vec()).collect();
    let encode = |s: &Sentence| {
        let x: Matrix = s
            .tokens
            .iter()
            .map(|&t| model.embeddings.data[t * de..(t + 1) * de].to_vec())
            .collect();
        oracle_conv(&x, &kernel, &model.conv_bias.data)
    };
    let prototypes: Matrix = task
        .support
        .iter()
        .map(|group| {
            let hs: Vec<Matrix> = group.iter().map(encode).collect();
            let v = oracle_common_vector(&hs);
            let wi = oracle_attention_matrix(&v, &w, &model.sa_bias.data);
            let rs: Vec<Vec<f64>> = hs.iter().map(|h| oracle_denoise(h, &v, Some(&wi)).1).collect();
            oracle_mean_rows(&rs)
        })
        .collect();
    task.queries
        .iter()
        .map(|q| {
            let (_, reps) = oracle_query(&encode(&q.sentence), &prototypes);
            oracle_distances(&prototypes, &reps)
        })
        .collect()
}

/// Brute-force ranking AUC: fraction of (positive, negative) pairs ordered
/// correctly, ties counted as one half.
pub fn oracle_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut good = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| good / pairs as f64)
}

/// Per-class confusion counts, then the mean of per-class F1.
pub fn oracle_macro_f1(predicted: &[Vec<bool>], labels: &[Vec<bool>], n: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, l) in predicted.iter().zip(labels) {
            match (p[c], l[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        // harmonic mean of precision and recall, written over the counts
        let f1 = if tp == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        total += f1;
    }
    total / n as f64
}

// ---------------------------------------------------------------------------
// fixtures

/// Small random model and a corpus to sample tiny episodes from.
pub fn tiny_setup(seed: u64, n_classes: usize) -> (Corpus, ModelParams, ModelConfig) {
    let synth = SyntheticConfig {
        num_classes: n_classes,
        sentences_per_class: 20,
        multi_aspect_fraction: 0.4,
        vocab_size: n_classes * 4 + 30,
        sentence_length_range: (1, 7),
        signal_tokens_per_class: 4,
        signal_per_aspect: 1,
    };
    let corpus = generate_synthetic(&synth, seed).unwrap();
    let config = ModelConfig {
        embedding_dim: 6,
        hidden_dim: 5,
        repeat: 3,
        init_std: 0.4,
        ..Default::default()
    };
    let table = EmbeddingTable::random(corpus.vocab(), config.embedding_dim, seed);
    let mut model = ModelParams::init(&config, &table, seed).unwrap();
    // spread the embeddings so attention is far from uniform
    model.embeddings.data.iter_mut().for_each(|x| *x *= 8.0);
    (corpus, model, config)
}

/// The synthetic benchmark of the end-to-end runs: 50 classes of 100
/// sentences, 30 % two-aspect sentences, a 30/10/10 class split and the
/// companion embedding file.
pub struct Benchmark {
    pub corpus: Corpus,
    pub split: ClassSplit,
    pub vectors: HashMap<String, Vec<f64>>,
}

impl Benchmark {
    pub fn new(seed: u64) -> Self {
        let synth = SyntheticConfig {
            num_classes: 50,
            sentences_per_class: 100,
            multi_aspect_fraction: 0.3,
            ..Default::default()
        };
        let corpus = generate_synthetic(&synth, seed).unwrap();
        let vectors = generate_synthetic_embeddings(&synth, &SyntheticEmbeddingConfig::default(), seed)
            .unwrap()
            .into_iter()
            .collect();
        let split =
            split_classes(&corpus, &SplitSpec::Counts { train: 30, val: 10, test: 10 }, seed).unwrap();
        Benchmark { corpus, split, vectors }
    }

    pub fn embeddings(&self, dim: usize, seed: u64) -> EmbeddingTable {
        EmbeddingTable::from_vectors(self.corpus.vocab(), dim, &self.vectors, seed).unwrap()
    }
}
