//! Checks shared by the topic tests and the acceptance runner. Each returns
//! the measured quantity so callers can assert on it and report it.

use fewshot_acd::episode::{EpisodeSampler, EpisodeShape, MetaTask};
use fewshot_acd::metrics::{auc, macro_f1};
use fewshot_acd::model::{
    class_attention_matrix, common_aspect_vector, compute_prototype, denoise_instance, distances,
    forward_episode, query_representations, rank, Ablation, BoundModel, DistanceKind, ModelParams,
};
use fewshot_acd::tensor::{concat_rows, conv1d_same, Tensor};
use fewshot_acd::threshold::{beta_log_prob, beta_log_pdf, policy_forward, BoundPolicy, PolicyParams};
use fewshot_acd::training::mse_loss;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;

// ---------------------------------------------------------------------------
// autograd

type Inputs = Vec<(Vec<usize>, Vec<f64>)>;

fn input<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> (Vec<usize>, Vec<f64>) {
    let len = shape.iter().product();
    (shape.to_vec(), uniform_vec(rng, len, lo, hi))
}

/// Worst finite-difference relative error of every registered op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(11);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Inputs, f: &dyn Fn(&[Tensor]) -> fewshot_acd::Result<Tensor>| {
        out.push((name, grad_check(&inputs, |t| project(&f(t)?, 99))));
    };
    let pair = |r: &mut ChaCha8Rng| vec![input(r, &[3, 4], -1.0, 1.0), input(r, &[3, 4], -1.0, 1.0)];

    check("add", pair(&mut r), &|t| t[0].add(&t[1]));
    check("sub", pair(&mut r), &|t| t[0].sub(&t[1]));
    check("mul", pair(&mut r), &|t| t[0].mul(&t[1]));
    check("scale", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| Ok(t[0].scale(-1.7)));
    check("neg", vec![input(&mut r, &[2, 3], -1.0, 1.0)], &|t| Ok(t[0].neg()));
    check(
        "add_row",
        vec![input(&mut r, &[3, 4], -1.0, 1.0), input(&mut r, &[1, 4], -1.0, 1.0)],
        &|t| t[0].add_row(&t[1]),
    );
    check(
        "matmul",
        vec![input(&mut r, &[3, 4], -1.0, 1.0), input(&mut r, &[4, 2], -1.0, 1.0)],
        &|t| t[0].matmul(&t[1]),
    );
    check("transpose", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| t[0].transpose());
    check("square", vec![input(&mut r, &[3, 4], -2.0, 2.0)], &|t| Ok(t[0].square()));
    check("tanh", vec![input(&mut r, &[3, 4], -2.0, 2.0)], &|t| Ok(t[0].tanh()));
    check("sqrt", vec![input(&mut r, &[3, 4], 0.3, 3.0)], &|t| t[0].sqrt());
    check("softplus", vec![input(&mut r, &[3, 4], -3.0, 3.0)], &|t| Ok(t[0].softplus()));
    check("ln_gamma", vec![input(&mut r, &[3, 4], 0.5, 6.0)], &|t| t[0].ln_gamma());
    check("sum", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| Ok(t[0].square().sum()));
    check("mean", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| Ok(t[0].square().mean()));
    check("sum_axis 0", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| t[0].sum_axis(0));
    check("sum_axis 1", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| t[0].sum_axis(1));
    check("mean_axis 0", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| t[0].mean_axis(0));
    check("mean_axis 1", vec![input(&mut r, &[3, 4], -1.0, 1.0)], &|t| t[0].mean_axis(1));
    check(
        "concat_rows",
        vec![
            input(&mut r, &[2, 3], -1.0, 1.0),
            input(&mut r, &[1, 3], -1.0, 1.0),
            input(&mut r, &[3, 3], -1.0, 1.0),
        ],
        &|t| concat_rows(t),
    );
    check("softmax T=1", vec![input(&mut r, &[3, 4], -2.0, 2.0)], &|t| t[0].softmax_rows(1.0));
    check("softmax T=2", vec![input(&mut r, &[3, 4], -2.0, 2.0)], &|t| t[0].softmax_rows(2.0));
    check(
        "conv1d_same",
        vec![
            input(&mut r, &[5, 3], -1.0, 1.0),
            input(&mut r, &[3, 3, 4], -1.0, 1.0),
            input(&mut r, &[1, 4], -1.0, 1.0),
        ],
        &|t| conv1d_same(&t[0], &t[1], &t[2]),
    );
    check("gather_rows", vec![input(&mut r, &[6, 3], -1.0, 1.0)], &|t| {
        t[0].gather_rows(&[0, 2, 2, 5])
    });
    out
}

fn bound_from(t: &[Tensor]) -> BoundModel {
    BoundModel {
        embeddings: t[0].clone(),
        conv_kernel: t[1].clone(),
        conv_bias: t[2].clone(),
        sa_weight: t[3].clone(),
        sa_bias: t[4].clone(),
    }
}

fn model_inputs(model: &ModelParams) -> Inputs {
    [&model.embeddings, &model.conv_kernel, &model.conv_bias, &model.sa_weight, &model.sa_bias]
        .iter()
        .map(|p| (p.shape.clone(), p.data.clone()))
        .collect()
}

/// Worst relative error of the episode loss gradient, for each distance.
pub fn episode_loss_gradient_errors() -> Vec<(&'static str, f64)> {
    let (corpus, model, _) = tiny_setup(3, 6);
    let task = EpisodeSampler::new(&corpus, corpus.classes(), EpisodeShape::new(3, 2, 2), 4)
        .sample()
        .unwrap();
    let labels: Vec<Vec<bool>> = task.queries.iter().map(|q| q.labels.clone()).collect();
    [("euclidean", DistanceKind::Euclidean), ("squared", DistanceKind::SquaredEuclidean)]
        .into_iter()
        .map(|(name, kind)| {
            let err = grad_check(&model_inputs(&model), |t| {
                let out = forward_episode(&task, &bound_from(t), kind, Ablation::default())?;
                mse_loss(&out.scores(1.0)?, &labels)
            });
            (name, err)
        })
        .collect()
}

fn policy_inputs(p: &PolicyParams) -> Inputs {
    [
        &p.trunk_weight,
        &p.trunk_bias,
        &p.head_a_weight,
        &p.head_a_bias,
        &p.head_b_weight,
        &p.head_b_bias,
    ]
    .iter()
    .map(|p| (p.shape.clone(), p.data.clone()))
    .collect()
}

fn policy_from(t: &[Tensor]) -> BoundPolicy {
    BoundPolicy {
        trunk_weight: t[0].clone(),
        trunk_bias: t[1].clone(),
        head_a_weight: t[2].clone(),
        head_a_bias: t[3].clone(),
        head_b_weight: t[4].clone(),
        head_b_bias: t[5].clone(),
    }
}

/// Σ −(score − score*)·log P(τ) with states, thresholds and rewards frozen.
fn frozen_policy_loss(t: &[Tensor], states: &Tensor, taus: &[f64], advantages: &[f64]) -> fewshot_acd::Result<Tensor> {
    let (a, b) = policy_forward(states, &policy_from(t))?;
    let log_p = beta_log_prob(&a, &b, taus)?;
    let neg: Vec<f64> = advantages.iter().map(|x| -x).collect();
    Ok(Tensor::new(vec![taus.len(), 1], neg)?.mul(&log_p)?.sum())
}

/// Worst relative error of the policy-gradient loss w.r.t. the policy weights.
pub fn policy_gradient_error() -> f64 {
    let mut r = rng(21);
    let policy = PolicyParams::init(7, 5, 0.5, 22);
    let states = Tensor::new(vec![4, 7], uniform_vec(&mut r, 28, -1.0, 1.0)).unwrap();
    let taus = uniform_vec(&mut r, 4, 0.05, 0.95);
    let advantages = [0.4, -0.25, 0.0, 1.0];
    grad_check(&policy_inputs(&policy), |t| frozen_policy_loss(t, &states, &taus, &advantages))
}

/// Gradients of a zero-advantage policy loss and the parameter change after
/// one Adam step on them.
pub fn zero_advantage_update() -> (f64, f64) {
    use fewshot_acd::param::{collect_grads, Parameters};
    use fewshot_acd::training::Adam;
    let mut r = rng(23);
    let mut policy = PolicyParams::init(7, 5, 0.5, 24);
    let before = policy.clone();
    let states = Tensor::new(vec![4, 7], uniform_vec(&mut r, 28, -1.0, 1.0)).unwrap();
    let taus = uniform_vec(&mut r, 4, 0.05, 0.95);
    let bound = policy.bind();
    let leaves = bound.leaves();
    frozen_policy_loss(&leaves, &states, &taus, &[0.0; 4]).unwrap().backward().unwrap();
    let grads = collect_grads(&leaves);
    let max_grad = grads.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    Adam::new(1e-4).step(&mut policy, &grads).unwrap();
    let moved = policy
        .named_params()
        .iter()
        .zip(before.named_params())
        .map(|((_, a), (_, b))| max_abs_diff(&a.data, &b.data))
        .fold(0.0, f64::max);
    (max_grad, moved)
}

// ---------------------------------------------------------------------------
// equation oracles

pub const ORACLE_NAMES: [&str; 8] = [
    "encoder convolution",
    "common aspect vector",
    "attention matrix",
    "support attention",
    "prototype",
    "query attention",
    "distance and ranking",
    "episode forward",
];

/// Largest deviation from the scalar-loop references, per stage, over
/// `cases` random shapes with N ≤ 5, K ≤ 5, n ≤ 7, d ≤ 8.
pub fn oracle_errors(cases: usize) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 8];
    let mut r = rng(31);
    for case in 0..cases {
        let n_way = r.random_range(1..=5);
        let k_shot = r.random_range(1..=5);
        let d = r.random_range(1..=8);
        let e = r.random_range(1..=4);

        // encoder
        let len = r.random_range(1..=7);
        let de = r.random_range(1..=8);
        let m = [1, 3, 5][r.random_range(0..3)];
        let x = random_matrix(&mut r, len, de);
        let kernel: Vec<Matrix> = (0..m).map(|_| random_matrix(&mut r, de, d)).collect();
        let bias = uniform_vec(&mut r, d, -1.0, 1.0);
        let flat: Vec<f64> = kernel.iter().flatten().flatten().copied().collect();
        let got = conv1d_same(
            &tensor(&x),
            &Tensor::new(vec![m, de, d], flat).unwrap(),
            &Tensor::row(&bias),
        )
        .unwrap();
        worst[0] = worst[0].max(max_abs_diff_m(&to_matrix(&got), &oracle_conv(&x, &kernel, &bias)));

        let w = random_matrix(&mut r, d, e);
        let b = uniform_vec(&mut r, d, -1.0, 1.0);
        let (w_t, b_t) = (tensor(&w), Tensor::row(&b));
        let mut protos = Vec::new();
        let mut proto_tensors = Vec::new();
        for _ in 0..n_way {
            let hs: Vec<Matrix> = (0..k_shot)
                .map(|_| {
                    let n = r.random_range(1..=7);
                    random_matrix(&mut r, n, d)
                })
                .collect();
            let h_t: Vec<Tensor> = hs.iter().map(tensor).collect();
            let v = oracle_common_vector(&hs);
            let v_t = common_aspect_vector(&h_t).unwrap();
            worst[1] = worst[1].max(max_abs_diff(v_t.data(), &v));

            let wi = oracle_attention_matrix(&v, &w, &b);
            let wi_t = class_attention_matrix(&v_t, &w_t, &b_t).unwrap();
            worst[2] = worst[2].max(max_abs_diff_m(&to_matrix(&wi_t), &wi));

            let mut rs = Vec::new();
            let mut r_t = Vec::new();
            for (h, ht) in hs.iter().zip(&h_t) {
                let identity = case % 4 == 3;
                let (beta, rv) = oracle_denoise(h, &v, (!identity).then_some(&wi));
                let (beta_t, rv_t) = denoise_instance(ht, &v_t, (!identity).then_some(&wi_t)).unwrap();
                worst[3] = worst[3]
                    .max(max_abs_diff(beta_t.data(), &beta))
                    .max(max_abs_diff(rv_t.data(), &rv));
                rs.push(rv);
                r_t.push(rv_t);
            }
            let p = oracle_mean_rows(&rs);
            let p_t = compute_prototype(&r_t).unwrap();
            worst[4] = worst[4].max(max_abs_diff(p_t.data(), &p));
            protos.push(p);
            proto_tensors.push(p_t);
        }
        let protos_t = concat_rows(&proto_tensors).unwrap();
        let nq = r.random_range(1..=7);
        let hq = random_matrix(&mut r, nq, d);
        let (rho, reps) = oracle_query(&hq, &protos);
        let (rho_t, reps_t) = query_representations(&tensor(&hq), &protos_t).unwrap();
        worst[5] = worst[5]
            .max(max_abs_diff_m(&to_matrix(&rho_t), &rho))
            .max(max_abs_diff_m(&to_matrix(&reps_t), &reps));

        let dist = oracle_distances(&protos, &reps);
        let dist_t = distances(&protos_t, &reps_t, DistanceKind::Euclidean).unwrap();
        worst[6] = worst[6].max(max_abs_diff(dist_t.data(), &dist));
        for t in [1.0, 2.0] {
            let y_t = rank(&protos_t, &reps_t, t, DistanceKind::Euclidean).unwrap();
            worst[6] = worst[6].max(max_abs_diff(y_t.data(), &oracle_rank(&dist, t)));
        }
    }

    // whole episodes through the encoder, with real token sequences
    let (corpus, model, _) = tiny_setup(41, 8);
    for case in 0..cases {
        let n_way = r.random_range(1..=5);
        let k_shot = r.random_range(1..=5);
        let task = EpisodeSampler::new(&corpus, corpus.classes(), EpisodeShape::new(n_way, k_shot, 2), case as u64)
            .sample()
            .unwrap();
        let out = forward_episode(&task, &model.bind_frozen(), DistanceKind::Euclidean, Ablation::default()).unwrap();
        let expected = oracle_episode_distances(&task, &model);
        worst[7] = worst[7].max(max_abs_diff_m(&to_matrix(&out.distances), &expected));
    }
    ORACLE_NAMES.iter().copied().zip(worst).collect()
}

// ---------------------------------------------------------------------------
// invariants

pub const PROPERTY_CASES: u32 = 1000;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

/// Random tiny episode plus a random model over a fixed corpus.
fn episode_strategy() -> impl Strategy<Value = (u64, u64, usize, usize)> {
    (any::<u64>(), any::<u64>(), 1usize..=5, 1usize..=5)
}

struct Fixture {
    corpus: Corpus,
    config: ModelConfig,
    table: EmbeddingTable,
}

impl Fixture {
    fn new() -> Self {
        let (corpus, _, config) = tiny_setup(51, 8);
        let table = EmbeddingTable::random(corpus.vocab(), config.embedding_dim, 51);
        Fixture { corpus, config, table }
    }

    fn draw(&self, (s1, s2, n, k): (u64, u64, usize, usize)) -> (MetaTask, ModelParams) {
        let task = EpisodeSampler::new(&self.corpus, self.corpus.classes(), EpisodeShape::new(n, k, 2), s1)
            .sample()
            .unwrap();
        let mut model = ModelParams::init(&self.config, &self.table, s2).unwrap();
        model.embeddings.data.iter_mut().for_each(|x| *x *= 8.0);
        (task, model)
    }
}

fn run(strategy: impl Strategy<Value = (u64, u64, usize, usize)>, test: impl Fn((u64, u64, usize, usize)) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner().run(&strategy, test).map_err(|e| e.to_string())
}

/// Every β and ρ row sums to 1 within 1e-12.
pub fn attention_sums_to_one() -> Result<(), String> {
    let fx = Fixture::new();
    run(episode_strategy(), |case| {
        let (task, model) = fx.draw(case);
        let out = forward_episode(&task, &model.bind_frozen(), DistanceKind::Euclidean, Ablation::default()).unwrap();
        for beta in out.support_attention.iter().flatten() {
            let s: f64 = beta.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12, "β sums to {s}");
        }
        for rho in &out.query_attention {
            for i in 0..rho.rows() {
                let s: f64 = rho.row_slice(i).iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-12, "ρ sums to {s}");
            }
        }
        Ok(())
    })
}

/// Shuffling each class's support instances leaves the prototypes unchanged
/// (up to summation order, 1e-12).
pub fn prototype_permutation_invariance() -> Result<(), String> {
    let fx = Fixture::new();
    run(episode_strategy(), |case| {
        let (task, model) = fx.draw(case);
        let mut shuffled = task.clone();
        let mut r = rng(case.0 ^ case.1);
        for group in &mut shuffled.support {
            group.shuffle(&mut r);
        }
        let bound = model.bind_frozen();
        let a = forward_episode(&task, &bound, DistanceKind::Euclidean, Ablation::default()).unwrap();
        let b = forward_episode(&shuffled, &bound, DistanceKind::Euclidean, Ablation::default()).unwrap();
        let diff = max_abs_diff(a.prototypes.data(), b.prototypes.data());
        prop_assert!(diff <= 1e-12, "prototypes moved by {diff}");
        Ok(())
    })
}

/// Relabelling the episode classes permutes the columns of ŷ accordingly.
pub fn class_permutation_equivariance() -> Result<(), String> {
    let fx = Fixture::new();
    run(episode_strategy(), |case| {
        let (task, model) = fx.draw(case);
        let mut perm: Vec<usize> = (0..task.n_way()).collect();
        perm.shuffle(&mut rng(case.0.rotate_left(7)));
        let permuted = task.permute_classes(&perm);
        let bound = model.bind_frozen();
        let y = forward_episode(&task, &bound, DistanceKind::Euclidean, Ablation::default())
            .unwrap()
            .scores(1.0)
            .unwrap();
        let y_p = forward_episode(&permuted, &bound, DistanceKind::Euclidean, Ablation::default())
            .unwrap()
            .scores(1.0)
            .unwrap();
        for q in 0..y.rows() {
            for (new, &old) in perm.iter().enumerate() {
                let diff = (y_p.row_slice(q)[new] - y.row_slice(q)[old]).abs();
                prop_assert!(diff <= 1e-12, "query {q}, class {old}: {diff}");
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// metrics

/// Number of random episodes on which `auc` or `macro_f1` differ from the
/// brute-force references.
pub fn metric_mismatches(episodes: usize) -> usize {
    let mut r = rng(61);
    let mut bad = 0;
    for _ in 0..episodes {
        let n = r.random_range(1..=10);
        let q = n * r.random_range(1..=5);
        let labels: Vec<Vec<bool>> = (0..q).map(|_| (0..n).map(|_| r.random_bool(0.3)).collect()).collect();
        let predicted: Vec<Vec<bool>> = (0..q).map(|_| (0..n).map(|_| r.random_bool(0.4)).collect()).collect();
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..q * n).map(|_| r.random_range(0..20) as f64 / 20.0).collect();
        let flat: Vec<bool> = labels.iter().flatten().copied().collect();
        if auc(&scores, &flat) != oracle_auc(&scores, &flat) {
            bad += 1;
        }
        if macro_f1(&predicted, &labels, n) != oracle_macro_f1(&predicted, &labels, n) {
            bad += 1;
        }
    }
    bad
}

/// (perfect, reversed, three-point tie case)
pub fn auc_analytic_cases() -> (Option<f64>, Option<f64>, Option<f64>) {
    let labels = [true, true, false, false];
    (
        auc(&[0.9, 0.8, 0.2, 0.1], &labels),
        auc(&[0.1, 0.2, 0.8, 0.9], &labels),
        auc(&[0.5, 0.5, 0.5], &[true, false, false]),
    )
}

// ---------------------------------------------------------------------------
// Beta machinery

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64, whole: f64, m: f64, fm: f64, tol: f64, depth: u32) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 50)
}

/// Largest |∫₀¹ pdf − 1| over `pairs` random (a, b) in (1, 12).
pub fn beta_normalization_error(pairs: usize) -> f64 {
    let mut r = rng(71);
    (0..pairs)
        .map(|_| {
            let a = r.random_range(1.05..12.0);
            let b = r.random_range(1.05..12.0);
            let pdf = |t: f64| {
                if t <= 0.0 || t >= 1.0 {
                    0.0
                } else {
                    beta_log_pdf(t, a, b).unwrap().exp()
                }
            };
            (integrate(&pdf, 0.0, 1.0, 1e-10) - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest |sample mean − a/(a+b)| over a few parameter pairs, 10⁵ draws each.
pub fn beta_sampler_mean_error() -> f64 {
    use fewshot_acd::threshold::{sample_threshold, BetaParams};
    let mut r = rng(81);
    [(2.0, 2.0), (2.0, 5.0), (7.0, 3.0), (1.5, 1.2)]
        .iter()
        .map(|&(a, b)| {
            let draws = 100_000;
            let sum: f64 = (0..draws)
                .map(|_| sample_threshold(BetaParams { a, b }, &mut r).unwrap())
                .sum();
            (sum / draws as f64 - a / (a + b)).abs()
        })
        .fold(0.0, f64::max)
}
