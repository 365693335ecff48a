//! Phase-2 optimization: the clipped surrogate and its analytic gradient,
//! plus the trigger and veto masks that decide which tokens contribute.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{self, TaskConfig};
use crate::error::{Error, Result};
use crate::linalg::{pairwise_sum, pairwise_sum_matrices, Matrix};
use crate::policy::{self, AdamConfig, OptimizerState, PolicyParams, StateFeatures};
use crate::rollout::{PromptGroup, RolloutRecord};

/// Which tokens of a triggered negative-advantage response are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VetoScope {
    NoMask,
    /// Every token with `rho < tau_c`.
    TriggerOnly,
    /// Every token strictly after the first trigger.
    Suffix,
    /// Tokens after the first trigger that are not themselves triggers.
    NonTriggerSuffix,
    /// The whole response.
    Sequence,
}

impl VetoScope {
    pub const ALL: [VetoScope; 5] = [
        VetoScope::NoMask,
        VetoScope::TriggerOnly,
        VetoScope::Suffix,
        VetoScope::NonTriggerSuffix,
        VetoScope::Sequence,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossNorm {
    /// Mean over groups of the mean over responses of the per-response token mean.
    GroupThenToken,
    /// Mean over all responses of the per-response token mean.
    BatchThenToken,
}

mod clip_bound {
    use serde::{Deserialize, Deserializer, Serializer};

    // `null` stands for an absent upper bound.
    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateConfig {
    pub clip_low: f64,
    #[serde(with = "clip_bound")]
    pub clip_high: f64,
    pub tau_c: f64,
    pub scope: VetoScope,
    pub loss_norm: LossNorm,
    #[serde(default)]
    pub kl_weight: f64,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: AdamConfig,
}

impl UpdateConfig {
    /// Standard GRPO: symmetric `[1 - eps, 1 + eps]` clip, no veto.
    pub fn grpo(eps: f64, lr: f64) -> Self {
        Self {
            clip_low: 1.0 - eps,
            clip_high: 1.0 + eps,
            tau_c: 1e-4,
            scope: VetoScope::NoMask,
            loss_norm: LossNorm::GroupThenToken,
            kl_weight: 0.0,
            lr,
            optimizer: AdamConfig::default(),
        }
    }

    /// Relaxed `[0, 5]` clipping with whole-response veto.
    pub fn mu_grpo(lr: f64) -> Self {
        Self {
            clip_low: 0.0,
            clip_high: 5.0,
            tau_c: 1e-4,
            scope: VetoScope::Sequence,
            loss_norm: LossNorm::BatchThenToken,
            kl_weight: 0.0,
            lr,
            optimizer: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_low >= 0.0 && self.clip_low < 1.0) {
            return Err(Error::config("update.clip_low", "must satisfy 0 <= clip_low < 1"));
        }
        if !(self.clip_high > 1.0) {
            return Err(Error::config("update.clip_high", "must be greater than 1"));
        }
        if !(self.tau_c > 0.0 && self.tau_c < 1.0) {
            return Err(Error::config("update.tau_c", "must satisfy 0 < tau_c < 1"));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::config("update.kl_weight", "must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("update.lr", "must be finite and positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) {
            return Err(Error::config("update.optimizer.beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("update.optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) {
            return Err(Error::config("update.optimizer.eps", "must be positive"));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::config("update.optimizer.weight_decay", "must be non-negative"));
        }
        Ok(())
    }
}

/// Per-token keep flags; recomputed from the current parameters each update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    pub keep: Vec<bool>,
}

impl TokenMask {
    pub fn all_keep(len: usize) -> Self {
        Self { keep: vec![true; len] }
    }

    /// Positions removed by the mask.
    pub fn dropped(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter(|(_, k)| !**k)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn n_dropped(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub loss: f64,
    pub clip_fraction: f64,
    pub veto_fraction: f64,
    /// Mean ratio over unmasked negative-advantage tokens; `None` if there are none.
    pub mean_neg_adv_ratio: Option<f64>,
    pub mean_reward: f64,
    pub grad_norm: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub n_tokens: usize,
    pub n_triggered: usize,
}

fn response_advantage(record: &RolloutRecord) -> Result<f64> {
    record
        .advantage
        .ok_or_else(|| Error::precondition("advantage not set; normalize the group first"))
}

fn check_record(task: &TaskConfig, record: &RolloutRecord) -> Result<()> {
    if record.behavior_logprobs.len() != record.tokens.len() {
        return Err(Error::precondition("behavior log-probs missing for some tokens"));
    }
    if record.tokens.len() != task.seq_len {
        return Err(Error::precondition("response length differs from task seq_len"));
    }
    Ok(())
}

/// `rho_t = exp(log pi_theta(a_t | x, a_<t) - b_t)`.
pub fn importance_ratios(params: &PolicyParams, task: &TaskConfig, record: &RolloutRecord) -> Result<Vec<f64>> {
    check_record(task, record)?;
    (0..record.len())
        .map(|t| {
            let f = env::features(task, &record.prompt, &record.tokens[..t])?;
            let lp = policy::logprob(params, &f, record.tokens[t])?;
            Ok((lp - record.behavior_logprobs[t]).exp())
        })
        .collect()
}

/// First (0-based) position of a negative-advantage token with `rho < tau_c`.
pub fn find_trigger(record: &RolloutRecord, ratios: &[f64], tau_c: f64) -> Result<Option<usize>> {
    let a = response_advantage(record)?;
    if ratios.len() != record.len() {
        return Err(Error::precondition("ratio count differs from token count"));
    }
    if a >= 0.0 {
        return Ok(None);
    }
    Ok(ratios.iter().position(|r| *r < tau_c))
}

pub fn compute_mask(record: &RolloutRecord, ratios: &[f64], config: &UpdateConfig) -> Result<TokenMask> {
    let Some(kappa) = find_trigger(record, ratios, config.tau_c)? else {
        return Ok(TokenMask::all_keep(record.len()));
    };
    let tau = config.tau_c;
    let keep = ratios
        .iter()
        .enumerate()
        .map(|(t, rho)| match config.scope {
            VetoScope::NoMask => true,
            VetoScope::TriggerOnly => *rho >= tau,
            VetoScope::Suffix => t <= kappa,
            VetoScope::NonTriggerSuffix => t <= kappa || *rho < tau,
            VetoScope::Sequence => false,
        })
        .collect();
    Ok(TokenMask { keep })
}

/// `clip(rho, lo, hi)`.
pub fn clip(rho: f64, lo: f64, hi: f64) -> f64 {
    rho.max(lo).min(hi)
}

/// Which side of `min(rho A, clip(rho) A)` determines a token's term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// `rho A` attains the min (ties included); the gradient is live.
    Unclipped,
    /// The clipped value is strictly smaller; the gradient is zero.
    Clipped,
}

/// Surrogate term and its branch for one token.
pub fn surrogate_term(rho: f64, advantage: f64, lo: f64, hi: f64) -> (f64, Branch) {
    let unclipped = rho * advantage;
    let clipped = clip(rho, lo, hi) * advantage;
    if unclipped <= clipped {
        (unclipped, Branch::Unclipped)
    } else {
        (clipped, Branch::Clipped)
    }
}

/// Output of [`surrogate_loss_and_grad`].
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub loss: f64,
    pub grad: Matrix,
    pub metrics: UpdateMetrics,
}

struct RecordContribution {
    objective: f64,
    kl: f64,
    grad: Matrix,
    n_tokens: usize,
    n_vetoed: usize,
    n_kept: usize,
    n_clipped: usize,
    neg_ratio_sum: f64,
    n_neg_kept: usize,
    min_ratio: f64,
    max_ratio: f64,
    triggered: bool,
    reward: f64,
}

fn record_contribution(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    task: &TaskConfig,
    record: &RolloutRecord,
    weight: f64,
    config: &UpdateConfig,
) -> Result<RecordContribution> {
    check_record(task, record)?;
    let a = response_advantage(record)?;
    let t_len = record.len();
    let mut feats: Vec<StateFeatures> = Vec::with_capacity(t_len);
    let mut logps: Vec<Vec<f64>> = Vec::with_capacity(t_len);
    let mut ratios = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let f = env::features(task, &record.prompt, &record.tokens[..t])?;
        let lp = policy::log_softmax(params, &f)?;
        ratios.push((lp[record.tokens[t]] - record.behavior_logprobs[t]).exp());
        feats.push(f);
        logps.push(lp);
    }
    let mask = compute_mask(record, &ratios, config)?;
    let triggered = find_trigger(record, &ratios, config.tau_c)?.is_some();

    let mut grad = Matrix::zeros(params.vocab_size(), params.feature_dim());
    let mut terms = Vec::with_capacity(t_len);
    let mut neg_ratios = Vec::new();
    let mut n_clipped = 0;
    for t in 0..t_len {
        if !mask.keep[t] {
            continue;
        }
        let rho = ratios[t];
        let (term, branch) = surrogate_term(rho, a, config.clip_low, config.clip_high);
        terms.push(term);
        if a < 0.0 {
            neg_ratios.push(rho);
        }
        match branch {
            Branch::Clipped => n_clipped += 1,
            Branch::Unclipped => {
                let coef = -weight * a * rho;
                if coef != 0.0 {
                    let probs: Vec<f64> = logps[t].iter().map(|x| x.exp()).collect();
                    policy::accumulate_score(&mut grad, &probs, &feats[t].values, record.tokens[t], coef);
                }
            }
        }
    }

    let mut kl = 0.0;
    if config.kl_weight > 0.0 {
        let reference = reference.ok_or_else(|| Error::precondition("kl_weight > 0 requires a reference policy"))?;
        let mut kls = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let lq = policy::log_softmax(reference, &feats[t])?;
            kls.push(policy::kl_from_logprobs(&logps[t], &lq));
            policy::accumulate_kl_grad(&mut grad, &logps[t], &lq, &feats[t].values, config.kl_weight * weight);
        }
        kl = weight * pairwise_sum(&kls);
    }

    Ok(RecordContribution {
        objective: weight * pairwise_sum(&terms),
        kl,
        grad,
        n_tokens: t_len,
        n_vetoed: mask.n_dropped(),
        n_kept: t_len - mask.n_dropped(),
        n_clipped,
        neg_ratio_sum: pairwise_sum(&neg_ratios),
        n_neg_kept: neg_ratios.len(),
        min_ratio: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        max_ratio: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        triggered,
        reward: record.reward,
    })
}

/// Negative clipped surrogate (plus optional KL) and its analytic gradient.
///
/// Masks and clip branches are piecewise-constant in the parameters and are
/// not differentiated. Records are evaluated in parallel and reduced
/// pairwise in record order, so the result is independent of thread count.
pub fn surrogate_loss_and_grad(
    params: &PolicyParams,
    reference: Option<&PolicyParams>,
    task: &TaskConfig,
    minibatch: &[PromptGroup],
    config: &UpdateConfig,
) -> Result<SurrogateEval> {
    if minibatch.is_empty() {
        return Err(Error::precondition("empty minibatch"));
    }
    let n_records: usize = minibatch.iter().map(|g| g.responses.len()).sum();
    let weighted: Vec<(&RolloutRecord, f64)> = minibatch
        .iter()
        .flat_map(|g| {
            let g_len = g.responses.len();
            g.responses.iter().map(move |r| {
                let t = r.len().max(1) as f64;
                let w = match config.loss_norm {
                    LossNorm::GroupThenToken => 1.0 / (minibatch.len() as f64 * g_len as f64 * t),
                    LossNorm::BatchThenToken => 1.0 / (n_records as f64 * t),
                };
                (r, w)
            })
        })
        .collect();

    let parts = weighted
        .par_iter()
        .map(|(r, w)| record_contribution(params, reference, task, r, *w, config))
        .collect::<Result<Vec<_>>>()?;

    let objective = pairwise_sum(&parts.iter().map(|p| p.objective).collect::<Vec<_>>());
    let kl = pairwise_sum(&parts.iter().map(|p| p.kl).collect::<Vec<_>>());
    let grads: Vec<Matrix> = parts.iter().map(|p| p.grad.clone()).collect();
    let grad = pairwise_sum_matrices(&grads, params.vocab_size(), params.feature_dim());
    if !grad.is_finite() {
        return Err(Error::NonFinite("surrogate gradient"));
    }

    let n_tokens: usize = parts.iter().map(|p| p.n_tokens).sum();
    let n_vetoed: usize = parts.iter().map(|p| p.n_vetoed).sum();
    let n_kept: usize = parts.iter().map(|p| p.n_kept).sum();
    let n_clipped: usize = parts.iter().map(|p| p.n_clipped).sum();
    let n_neg: usize = parts.iter().map(|p| p.n_neg_kept).sum();
    let neg_sum = pairwise_sum(&parts.iter().map(|p| p.neg_ratio_sum).collect::<Vec<_>>());
    let reward_sum = pairwise_sum(&parts.iter().map(|p| p.reward).collect::<Vec<_>>());

    let loss = -objective + config.kl_weight * kl;
    let metrics = UpdateMetrics {
        loss,
        clip_fraction: if n_kept > 0 { n_clipped as f64 / n_kept as f64 } else { 0.0 },
        veto_fraction: if n_tokens > 0 { n_vetoed as f64 / n_tokens as f64 } else { 0.0 },
        mean_neg_adv_ratio: (n_neg > 0).then(|| neg_sum / n_neg as f64),
        mean_reward: reward_sum / n_records as f64,
        grad_norm: grad.frobenius_norm(),
        min_ratio: parts.iter().map(|p| p.min_ratio).fold(f64::INFINITY, f64::min),
        max_ratio: parts.iter().map(|p| p.max_ratio).fold(f64::NEG_INFINITY, f64::max),
        n_tokens,
        n_triggered: parts.iter().filter(|p| p.triggered).count(),
    };
    Ok(SurrogateEval { loss, grad, metrics })
}

/// One model update: surrogate gradient followed by an AdamW step.
pub fn grpo_update(
    params: &PolicyParams,
    opt: &OptimizerState,
    reference: Option<&PolicyParams>,
    task: &TaskConfig,
    minibatch: &[PromptGroup],
    config: &UpdateConfig,
) -> Result<(PolicyParams, OptimizerState, UpdateMetrics)> {
    let eval = surrogate_loss_and_grad(params, reference, task, minibatch, config)?;
    let (p, o) = policy::adamw_step(params, opt, &eval.grad, config.lr, &config.optimizer)?;
    Ok((p, o, eval.metrics))
}
