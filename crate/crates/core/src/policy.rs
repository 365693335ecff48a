//! Linear-softmax autoregressive policy with analytic score gradients and AdamW.
//!
//! The policy maps a state feature vector `f` to logits `W f`, one row of `W`
//! per vocabulary token. Log-probabilities are always evaluated as
//! `logit - logsumexp(logits)`; probabilities are only materialised for
//! sampling and for the KL term.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Token identifier; digits are their own ids.
pub type Token = usize;

/// Policy parameters: a `vocab_size x feature_dim` weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    weights: Matrix,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Result<Self> {
        Self::from_weights(Matrix::zeros(vocab_size, feature_dim))
    }

    pub fn from_weights(weights: Matrix) -> Result<Self> {
        if weights.rows() < 2 {
            return Err(Error::precondition("vocab_size must be at least 2"));
        }
        if weights.cols() == 0 {
            return Err(Error::precondition("feature_dim must be positive"));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("policy weights"));
        }
        Ok(Self { weights })
    }

    /// Entries drawn uniformly from `[-scale, scale]`.
    pub fn random(vocab_size: usize, feature_dim: usize, scale: f64, rng: &mut impl rand::Rng) -> Result<Self> {
        let mut w = Matrix::zeros(vocab_size, feature_dim);
        for x in w.as_mut_slice() {
            *x = scale * (2.0 * rng.random::<f64>() - 1.0);
        }
        Self::from_weights(w)
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// SHA-256 over the little-endian weight bytes, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.vocab_size() as u64).to_le_bytes());
        hasher.update((self.feature_dim() as u64).to_le_bytes());
        for x in self.weights.as_slice() {
            hasher.update(x.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Feature encoding of a decoding state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeatures {
    pub values: Vec<f64>,
}

impl StateFeatures {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_features(params: &PolicyParams, features: &StateFeatures) -> Result<()> {
    if features.len() != params.feature_dim() {
        return Err(Error::Shape {
            expected: (params.feature_dim(), 1),
            got: (features.len(), 1),
        });
    }
    Ok(())
}

fn check_token(params: &PolicyParams, token: Token) -> Result<()> {
    if token >= params.vocab_size() {
        return Err(Error::precondition(format!(
            "token {token} out of range for vocabulary of {}",
            params.vocab_size()
        )));
    }
    Ok(())
}

pub fn logits(params: &PolicyParams, features: &StateFeatures) -> Result<Vec<f64>> {
    check_features(params, features)?;
    let w = params.weights();
    let z: Vec<f64> = (0..w.rows())
        .map(|r| w.row(r).iter().zip(&features.values).map(|(a, b)| a * b).sum())
        .collect();
    if z.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(z)
}

/// Log-probabilities of every token, computed as `z - logsumexp(z)`.
pub fn log_softmax(params: &PolicyParams, features: &StateFeatures) -> Result<Vec<f64>> {
    let z = logits(params, features)?;
    Ok(log_softmax_of(&z))
}

pub(crate) fn log_softmax_of(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

pub(crate) fn softmax_of(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Softmax of the logits with max-logit subtraction.
pub fn token_distribution(params: &PolicyParams, features: &StateFeatures) -> Result<Vec<f64>> {
    Ok(softmax_of(&logits(params, features)?))
}

pub fn logprob(params: &PolicyParams, features: &StateFeatures, token: Token) -> Result<f64> {
    check_token(params, token)?;
    Ok(log_softmax(params, features)?[token])
}

/// Gradient of `log pi(token | s)` with respect to the weights:
/// row `r` is `(1[r == token] - pi(r|s)) * f`.
pub fn grad_logprob(params: &PolicyParams, features: &StateFeatures, token: Token) -> Result<Matrix> {
    check_token(params, token)?;
    let probs = token_distribution(params, features)?;
    let mut grad = Matrix::zeros(params.vocab_size(), params.feature_dim());
    accumulate_score(&mut grad, &probs, &features.values, token, 1.0);
    Ok(grad)
}

/// `grad += scale * (onehot(token) - probs) f^T`, skipping zero feature entries.
pub(crate) fn accumulate_score(grad: &mut Matrix, probs: &[f64], features: &[f64], token: Token, scale: f64) {
    for (r, p) in probs.iter().enumerate() {
        let coef = scale * (if r == token { 1.0 } else { 0.0 } - p);
        if coef == 0.0 {
            continue;
        }
        let row = grad.row_mut(r);
        for (g, f) in row.iter_mut().zip(features) {
            if *f != 0.0 {
                *g += coef * f;
            }
        }
    }
}

/// Exact `KL(pi_theta(.|s) || pi_ref(.|s))` over the vocabulary.
pub fn kl_to_ref(params: &PolicyParams, reference: &PolicyParams, features: &StateFeatures) -> Result<f64> {
    if params.weights().shape() != reference.weights().shape() {
        return Err(Error::Shape {
            expected: params.weights().shape(),
            got: reference.weights().shape(),
        });
    }
    let lp = log_softmax(params, features)?;
    let lq = log_softmax(reference, features)?;
    Ok(kl_from_logprobs(&lp, &lq))
}

pub(crate) fn kl_from_logprobs(lp: &[f64], lq: &[f64]) -> f64 {
    let kl: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl.max(0.0)
}

/// `grad += scale * d KL / d W` where `dKL/dz_k = p_k (log p_k - log q_k - KL)`.
pub(crate) fn accumulate_kl_grad(grad: &mut Matrix, lp: &[f64], lq: &[f64], features: &[f64], scale: f64) {
    let kl: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
    for (k, (a, b)) in lp.iter().zip(lq).enumerate() {
        let coef = scale * a.exp() * (a - b - kl);
        let row = grad.row_mut(k);
        for (g, f) in row.iter_mut().zip(features) {
            if *f != 0.0 {
                *g += coef * f;
            }
        }
    }
}

/// Draws one token by inverse-CDF sampling from `probs`.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl rand::Rng) -> Token {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` just below 1; fall back to the last token with mass.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// AdamW hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(params: &PolicyParams) -> Self {
        let (r, c) = params.weights().shape();
        Self {
            first_moment: Matrix::zeros(r, c),
            second_moment: Matrix::zeros(r, c),
            step_count: 0,
        }
    }
}

/// One decoupled-weight-decay Adam step (decay applied before the moment update).
pub fn adamw_step(
    params: &PolicyParams,
    opt: &OptimizerState,
    grad: &Matrix,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(PolicyParams, OptimizerState)> {
    params.weights().check_shape(grad)?;
    params.weights().check_shape(&opt.first_moment)?;
    params.weights().check_shape(&opt.second_moment)?;
    if !grad.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let step = opt.step_count + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);

    let mut w = params.weights().clone();
    let mut m = opt.first_moment.clone();
    let mut v = opt.second_moment.clone();
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((wi, mi), vi), gi) in w
        .as_mut_slice()
        .iter_mut()
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
        .zip(grad.as_slice())
    {
        *wi *= decay;
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *wi -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok((
        PolicyParams::from_weights(w)?,
        OptimizerState {
            first_moment: m,
            second_moment: v,
            step_count: step,
        },
    ))
}
