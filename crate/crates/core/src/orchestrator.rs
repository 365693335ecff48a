//! Staged synchronous training: freeze the policy as the behavior policy,
//! generate a static dataset, then consume it over `staleness` updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{PromptSource, TaskConfig};
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::policy::{OptimizerState, PolicyParams};
use crate::rollout::{self, generate_response, StaleDataset};
use crate::seeding::{rng_for, stream};
use crate::update::{grpo_update, UpdateConfig, UpdateMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub total_updates: usize,
    pub mini_batch_groups: usize,
    pub staleness: usize,
    pub group_size: usize,
    pub n_stages: usize,
}

impl StageSchedule {
    pub fn new(n_stages: usize, staleness: usize, mini_batch_groups: usize, group_size: usize) -> Self {
        Self {
            total_updates: n_stages * staleness,
            mini_batch_groups,
            staleness,
            group_size,
            n_stages,
        }
    }

    /// Prompt groups generated per stage, `B_train = mu * B_mini`.
    pub fn groups_per_stage(&self) -> usize {
        self.staleness * self.mini_batch_groups
    }

    /// Responses generated over the whole run.
    pub fn response_budget(&self) -> usize {
        self.total_updates * self.mini_batch_groups * self.group_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.staleness == 0 {
            return Err(Error::config("schedule.staleness", "must be at least 1"));
        }
        if self.mini_batch_groups == 0 {
            return Err(Error::config("schedule.mini_batch_groups", "must be at least 1"));
        }
        if self.group_size < 2 {
            return Err(Error::config("schedule.group_size", "must be at least 2"));
        }
        if self.n_stages == 0 {
            return Err(Error::config("schedule.n_stages", "must be at least 1"));
        }
        if self.total_updates != self.n_stages * self.staleness {
            return Err(Error::config(
                "schedule.total_updates",
                format!(
                    "must equal n_stages * staleness = {}",
                    self.n_stages * self.staleness
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Evaluate after every `interval` updates; `0` disables periodic evaluation.
    pub interval: usize,
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            interval: 0,
            n_prompts: 256,
            samples_per_prompt: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEntry {
    pub update: usize,
    pub stage: usize,
    #[serde(flatten)]
    pub metrics: UpdateMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: usize,
    pub n_updates: usize,
    pub n_groups: usize,
    pub n_responses: usize,
    pub dataset_reward: f64,
    pub mean_reward: f64,
    pub mean_veto_fraction: f64,
    pub mean_clip_fraction: f64,
    pub behavior_policy_hash: String,
    pub dataset_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub update: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub updates: Vec<UpdateEntry>,
    pub stages: Vec<StageSummary>,
    pub evals: Vec<EvalPoint>,
    pub responses_generated: usize,
}

impl MetricsLog {
    /// Post-hoc best checkpoint by evaluation accuracy; earliest wins ties.
    pub fn best_eval(&self) -> Option<EvalPoint> {
        self.evals
            .iter()
            .copied()
            .fold(None, |best: Option<EvalPoint>, e| match best {
                Some(b) if b.accuracy >= e.accuracy => Some(b),
                _ => Some(e),
            })
    }

    pub fn final_stage(&self) -> Option<&StageSummary> {
        self.stages.last()
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone)]
pub struct TrainingSetup {
    pub task: TaskConfig,
    pub update: UpdateConfig,
    pub eval: EvalSettings,
    pub seed: u64,
    pub init: PolicyParams,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: MetricsLog,
    pub params: PolicyParams,
    pub opt: OptimizerState,
}

/// Mean verifier reward over `n_prompts * samples_per_prompt` temperature-1 samples.
///
/// Prompt `i` draws from its own derived stream, so the result is a fixed
/// function of `(params, seed)` across thread counts.
pub fn evaluate_policy(
    params: &PolicyParams,
    task: &TaskConfig,
    n_prompts: usize,
    samples_per_prompt: usize,
    seed: u64,
) -> Result<f64> {
    if n_prompts == 0 || samples_per_prompt == 0 {
        return Err(Error::precondition("evaluation needs at least one prompt and one sample"));
    }
    let mut prompt_rng = rng_for(seed, &[stream::EVAL, u64::MAX]);
    let mut source = PromptSource::new();
    let prompts: Vec<_> = (0..n_prompts).map(|_| source.sample_prompt(task, &mut prompt_rng)).collect();
    let per_prompt = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = rng_for(seed, &[stream::EVAL, i as u64]);
            let rewards = (0..samples_per_prompt)
                .map(|_| generate_response(params, task, p, &mut rng).map(|r| r.reward))
                .collect::<Result<Vec<_>>>()?;
            Ok(pairwise_sum(&rewards))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&per_prompt) / (n_prompts * samples_per_prompt) as f64)
}

struct Trainer<'a> {
    setup: &'a TrainingSetup,
    params: PolicyParams,
    opt: OptimizerState,
    log: MetricsLog,
}

impl<'a> Trainer<'a> {
    fn new(setup: &'a TrainingSetup) -> Result<Self> {
        let mut trainer = Self {
            setup,
            params: setup.init.clone(),
            opt: OptimizerState::new(&setup.init),
            log: MetricsLog::default(),
        };
        if setup.eval.interval > 0 {
            trainer.evaluate(0)?;
        }
        Ok(trainer)
    }

    fn evaluate(&mut self, update: usize) -> Result<()> {
        let e = &self.setup.eval;
        let accuracy = evaluate_policy(&self.params, &self.setup.task, e.n_prompts, e.samples_per_prompt, self.setup.seed)?;
        self.log.evals.push(EvalPoint { update, accuracy });
        Ok(())
    }

    /// Consumes `dataset` in order, `mini_batch_groups` groups per update.
    fn optimize_stage(&mut self, dataset: &StaleDataset, mini_batch_groups: usize, n_updates: usize, stage: usize) -> Result<()> {
        let checksum = dataset.checksum();
        let first = self.log.updates.len();
        for chunk in dataset.groups.chunks_exact(mini_batch_groups).take(n_updates) {
            let (p, o, metrics) = grpo_update(
                &self.params,
                &self.opt,
                Some(&self.setup.init),
                &self.setup.task,
                chunk,
                &self.setup.update,
            )?;
            self.params = p;
            self.opt = o;
            let update = self.log.updates.len() + 1;
            self.log.updates.push(UpdateEntry { update, stage, metrics });
            let interval = self.setup.eval.interval;
            if interval > 0 && update % interval == 0 {
                self.evaluate(update)?;
            }
        }
        if dataset.checksum() != checksum {
            return Err(Error::precondition("stage dataset changed during optimization"));
        }
        let entries = &self.log.updates[first..];
        let mean = |f: &dyn Fn(&UpdateEntry) -> f64| {
            pairwise_sum(&entries.iter().map(f).collect::<Vec<_>>()) / entries.len().max(1) as f64
        };
        self.log.stages.push(StageSummary {
            stage,
            n_updates: entries.len(),
            n_groups: dataset.n_groups(),
            n_responses: dataset.n_responses(),
            dataset_reward: dataset.mean_reward(),
            mean_reward: mean(&|e| e.metrics.mean_reward),
            mean_veto_fraction: mean(&|e| e.metrics.veto_fraction),
            mean_clip_fraction: mean(&|e| e.metrics.clip_fraction),
            behavior_policy_hash: dataset.behavior_policy_hash.clone(),
            dataset_checksum: checksum,
        });
        Ok(())
    }

    fn finish(mut self) -> Result<TrainingOutcome> {
        let last = self.log.updates.len();
        if self.setup.eval.interval > 0 && self.log.evals.last().map(|e| e.update) != Some(last) {
            self.evaluate(last)?;
        }
        Ok(TrainingOutcome {
            log: self.log,
            params: self.params,
            opt: self.opt,
        })
    }
}

/// Multi-stage training. Stage `k` freezes a copy of the current policy as
/// `beta_k`, generates `staleness * mini_batch_groups` groups from it, and
/// then runs `staleness` updates over disjoint minibatches in dataset order.
pub fn run_staged_training(schedule: &StageSchedule, setup: &TrainingSetup) -> Result<TrainingOutcome> {
    schedule.validate()?;
    setup.update.validate()?;
    let mut trainer = Trainer::new(setup)?;
    let mut prompts = PromptSource::new();
    for stage in 0..schedule.n_stages {
        let behavior = trainer.params.clone();
        let dataset = rollout::build_stage_dataset(
            &behavior,
            &setup.task,
            schedule.groups_per_stage(),
            schedule.group_size,
            setup.seed,
            stage,
            &mut prompts,
        )?;
        trainer.log.responses_generated += dataset.n_responses();
        trainer.optimize_stage(&dataset, schedule.mini_batch_groups, schedule.staleness, stage)?;
    }
    trainer.finish()
}

/// A single optimization phase over a prebuilt dataset: `floor(n_groups / B_mini)`
/// updates, so the batch size alone sets the staleness.
pub fn run_fixed_dataset(dataset: &StaleDataset, mini_batch_groups: usize, setup: &TrainingSetup) -> Result<TrainingOutcome> {
    setup.update.validate()?;
    if mini_batch_groups == 0 || mini_batch_groups > dataset.n_groups() {
        return Err(Error::precondition(format!(
            "mini_batch_groups {} must lie in 1..={} (dataset size)",
            mini_batch_groups,
            dataset.n_groups()
        )));
    }
    let n_updates = dataset.n_groups() / mini_batch_groups;
    let mut trainer = Trainer::new(setup)?;
    trainer.optimize_stage(dataset, mini_batch_groups, n_updates, dataset.stage_index)?;
    trainer.finish()
}

/// Staleness implied by running a fixed dataset at a given batch size.
pub fn implied_staleness(n_groups: usize, mini_batch_groups: usize) -> usize {
    n_groups / mini_batch_groups
}
