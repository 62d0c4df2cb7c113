//! Per-instance decision thresholds drawn from a learned Beta distribution.
//!
//! The policy reads the squared prototype/query differences together with the
//! ranking scores and outputs Beta(a, b) parameters. Training samples a
//! threshold and rewards its instance F1 relative to the F1 of the
//! distribution's mode; inference uses the mode directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::param::{Param, Parameters};
use crate::tensor::{softplus, Tensor};

/// Concatenates `(rⁱ − rⁱ_q)²` for every class, then the ranking scores.
///
/// `prototypes` and `query_reps` are row-major N×d.
pub fn build_state(prototypes: &[f64], query_reps: &[f64], scores: &[f64]) -> Result<Vec<f64>> {
    if prototypes.len() != query_reps.len() || scores.is_empty() || !prototypes.len().is_multiple_of(scores.len()) {
        return Err(Error::shape(
            "build_state",
            format!(
                "{} prototype values, {} query values, {} scores",
                prototypes.len(),
                query_reps.len(),
                scores.len()
            ),
        ));
    }
    let mut state: Vec<f64> = prototypes
        .iter()
        .zip(query_reps)
        .map(|(r, q)| (r - q) * (r - q))
        .collect();
    state.extend_from_slice(scores);
    Ok(state)
}

pub fn state_len(n_way: usize, hidden_dim: usize) -> usize {
    n_way * hidden_dim + n_way
}

/// Trunk `tanh(s·W + b)` followed by two linear heads for a and b.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub trunk_weight: Param,
    pub trunk_bias: Param,
    pub head_a_weight: Param,
    pub head_a_bias: Param,
    pub head_b_weight: Param,
    pub head_b_bias: Param,
}

impl PolicyParams {
    pub fn init(state_dim: usize, hidden: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams {
            trunk_weight: Param::normal(vec![state_dim, hidden], std, &mut rng),
            trunk_bias: Param::normal(vec![1, hidden], std, &mut rng),
            head_a_weight: Param::normal(vec![hidden, 1], std, &mut rng),
            head_a_bias: Param::normal(vec![1, 1], std, &mut rng),
            head_b_weight: Param::normal(vec![hidden, 1], std, &mut rng),
            head_b_bias: Param::normal(vec![1, 1], std, &mut rng),
        }
    }

    pub fn zeros(state_dim: usize, hidden: usize) -> Self {
        PolicyParams {
            trunk_weight: Param::zeros(vec![state_dim, hidden]),
            trunk_bias: Param::zeros(vec![1, hidden]),
            head_a_weight: Param::zeros(vec![hidden, 1]),
            head_a_bias: Param::zeros(vec![1, 1]),
            head_b_weight: Param::zeros(vec![hidden, 1]),
            head_b_bias: Param::zeros(vec![1, 1]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.trunk_weight.shape[0]
    }

    pub fn bind(&self) -> BoundPolicy {
        BoundPolicy {
            trunk_weight: self.trunk_weight.bind(),
            trunk_bias: self.trunk_bias.bind(),
            head_a_weight: self.head_a_weight.bind(),
            head_a_bias: self.head_a_bias.bind(),
            head_b_weight: self.head_b_weight.bind(),
            head_b_bias: self.head_b_bias.bind(),
        }
    }

    pub fn from_named(mut named: Vec<(String, Param)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Param> {
            let i = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            Ok(named.swap_remove(i).1)
        };
        let p = PolicyParams {
            trunk_weight: take("trunk_weight")?,
            trunk_bias: take("trunk_bias")?,
            head_a_weight: take("head_a_weight")?,
            head_a_bias: take("head_a_bias")?,
            head_b_weight: take("head_b_weight")?,
            head_b_bias: take("head_b_bias")?,
        };
        let hidden = p.trunk_weight.shape.get(1).copied().unwrap_or(0);
        let ok = p.trunk_weight.shape.len() == 2
            && p.trunk_bias.shape == [1, hidden]
            && p.head_a_weight.shape == [hidden, 1]
            && p.head_b_weight.shape == [hidden, 1]
            && p.head_a_bias.shape == [1, 1]
            && p.head_b_bias.shape == [1, 1];
        if !ok {
            return Err(Error::Checkpoint("inconsistent policy array shapes".into()));
        }
        Ok(p)
    }
}

impl Parameters for PolicyParams {
    fn named_params(&self) -> Vec<(&'static str, &Param)> {
        vec![
            ("trunk_weight", &self.trunk_weight),
            ("trunk_bias", &self.trunk_bias),
            ("head_a_weight", &self.head_a_weight),
            ("head_a_bias", &self.head_a_bias),
            ("head_b_weight", &self.head_b_weight),
            ("head_b_bias", &self.head_b_bias),
        ]
    }

    fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![
            ("trunk_weight", &mut self.trunk_weight),
            ("trunk_bias", &mut self.trunk_bias),
            ("head_a_weight", &mut self.head_a_weight),
            ("head_a_bias", &mut self.head_a_bias),
            ("head_b_weight", &mut self.head_b_weight),
            ("head_b_bias", &mut self.head_b_bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub trunk_weight: Tensor,
    pub trunk_bias: Tensor,
    pub head_a_weight: Tensor,
    pub head_a_bias: Tensor,
    pub head_b_weight: Tensor,
    pub head_b_bias: Tensor,
}

impl BoundPolicy {
    pub fn leaves(&self) -> Vec<Tensor> {
        vec![
            self.trunk_weight.clone(),
            self.trunk_bias.clone(),
            self.head_a_weight.clone(),
            self.head_a_bias.clone(),
            self.head_b_weight.clone(),
            self.head_b_bias.clone(),
        ]
    }
}

/// Beta parameters for a batch of states (one state per row).
/// Both outputs are `1 + softplus(·)`, B×1.
pub fn policy_forward(states: &Tensor, policy: &BoundPolicy) -> Result<(Tensor, Tensor)> {
    let hidden = states
        .matmul(&policy.trunk_weight)?
        .add_row(&policy.trunk_bias)?
        .tanh();
    let ones = Tensor::new(vec![states.rows(), 1], vec![1.0; states.rows()])?;
    let a = hidden
        .matmul(&policy.head_a_weight)?
        .add_row(&policy.head_a_bias)?
        .softplus()
        .add(&ones)?;
    let b = hidden
        .matmul(&policy.head_b_weight)?
        .add_row(&policy.head_b_bias)?
        .softplus()
        .add(&ones)?;
    if a.data().iter().chain(b.data()).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("policy produced non-finite Beta parameters".into()));
    }
    Ok((a, b))
}

/// Beta parameters for a single state without graph tracking.
pub fn policy_params_for(state: &[f64], policy: &PolicyParams) -> Result<BetaParams> {
    let s = policy.state_dim();
    if state.len() != s {
        return Err(Error::shape(
            "policy_forward",
            format!("state of length {} for a policy expecting {s}", state.len()),
        ));
    }
    let h = policy.trunk_weight.shape[1];
    let w = &policy.trunk_weight.data;
    let hidden: Vec<f64> = (0..h)
        .map(|j| {
            let z: f64 = state.iter().enumerate().map(|(i, x)| x * w[i * h + j]).sum();
            (z + policy.trunk_bias.data[j]).tanh()
        })
        .collect();
    let head = |wt: &Param, b: &Param| {
        let z: f64 = hidden.iter().zip(&wt.data).map(|(x, w)| x * w).sum();
        1.0 + softplus(z + b.data[0])
    };
    let p = BetaParams {
        a: head(&policy.head_a_weight, &policy.head_a_bias),
        b: head(&policy.head_b_weight, &policy.head_b_bias),
    };
    if !p.a.is_finite() || !p.b.is_finite() {
        return Err(Error::Numeric("policy produced non-finite Beta parameters".into()));
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn mode(&self) -> Result<f64> {
        beta_mode(self.a, self.b)
    }

    pub fn log_pdf(&self, tau: f64) -> Result<f64> {
        beta_log_pdf(tau, self.a, self.b)
    }
}

/// (a − 1) / (a + b − 2), defined for a, b > 1.
pub fn beta_mode(a: f64, b: f64) -> Result<f64> {
    if !(a > 1.0 && b > 1.0) {
        return Err(Error::Domain(format!("Beta mode needs a, b > 1, got ({a}, {b})")));
    }
    Ok((a - 1.0) / (a + b - 2.0))
}

pub fn ln_beta_fn(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

pub fn beta_log_pdf(tau: f64, a: f64, b: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("Beta density at {tau}")));
    }
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::Domain(format!("Beta parameters ({a}, {b})")));
    }
    Ok((a - 1.0) * tau.ln() + (b - 1.0) * (-tau).ln_1p() - ln_beta_fn(a, b))
}

/// Differentiable log-density of fixed thresholds under Beta(a, b), all B×1.
pub fn beta_log_prob(a: &Tensor, b: &Tensor, taus: &[f64]) -> Result<Tensor> {
    if taus.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::Domain("threshold outside (0, 1)".into()));
    }
    let rows = a.rows();
    let ones = Tensor::new(vec![rows, 1], vec![1.0; rows])?;
    let ln_tau = Tensor::new(vec![rows, 1], taus.iter().map(|t| t.ln()).collect())?;
    let ln_rest = Tensor::new(vec![rows, 1], taus.iter().map(|t| (-t).ln_1p()).collect())?;
    a.sub(&ones)?
        .mul(&ln_tau)?
        .add(&b.sub(&ones)?.mul(&ln_rest)?)?
        .sub(&a.ln_gamma()?)?
        .sub(&b.ln_gamma()?)?
        .add(&a.add(b)?.ln_gamma()?)
}

/// Draws a threshold strictly inside (0, 1).
pub fn sample_threshold<R: Rng + ?Sized>(params: BetaParams, rng: &mut R) -> Result<f64> {
    let dist = Beta::new(params.a, params.b)
        .map_err(|e| Error::Domain(format!("Beta({}, {}): {e}", params.a, params.b)))?;
    loop {
        let t = dist.sample(rng);
        if t > 0.0 && t < 1.0 {
            return Ok(t);
        }
    }
}

/// −(score − score*) · log P(τ)
pub fn policy_loss(score: f64, baseline_score: f64, log_p: f64) -> f64 {
    -(score - baseline_score) * log_p
}
