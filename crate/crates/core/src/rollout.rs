//! Phase-1 generation: a frozen behavior policy samples response groups with
//! their log-probabilities, which become the static dataset for one stage.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{self, Prompt, PromptSource, TaskConfig};
use crate::error::{Error, Result};
use crate::policy::{self, PolicyParams, Token};
use crate::seeding::{rng_for, stream};

/// One sampled response with everything Phase 2 needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt: Prompt,
    pub tokens: Vec<Token>,
    pub behavior_logprobs: Vec<f64>,
    pub reward: f64,
    /// `None` until the group has been normalized.
    pub advantage: Option<f64>,
}

impl RolloutRecord {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.behavior_logprobs.len() != self.tokens.len() {
            return Err(Error::precondition("behavior log-prob count differs from token count"));
        }
        if self.behavior_logprobs.iter().any(|b| !(b.is_finite() && *b <= 0.0)) {
            return Err(Error::precondition("behavior log-probs must be finite and non-positive"));
        }
        if let Some(a) = self.advantage {
            if !a.is_finite() {
                return Err(Error::NonFinite("advantage"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGroup {
    pub prompt: Prompt,
    pub responses: Vec<RolloutRecord>,
}

impl PromptGroup {
    pub fn is_normalized(&self) -> bool {
        self.responses.iter().all(|r| r.advantage.is_some())
    }
}

/// The static dataset `D_k` consumed over one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StaleDataset {
    pub stage_index: usize,
    pub groups: Vec<PromptGroup>,
    pub behavior_policy_hash: String,
}

impl StaleDataset {
    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_responses(&self) -> usize {
        self.groups.iter().map(|g| g.responses.len()).sum()
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.n_responses();
        if n == 0 {
            return 0.0;
        }
        let total: f64 = self.groups.iter().flat_map(|g| &g.responses).map(|r| r.reward).sum();
        total / n as f64
    }

    /// SHA-256 digest over every stored field, bit-exact for the floats.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.stage_index as u64).to_le_bytes());
        h.update(self.behavior_policy_hash.as_bytes());
        for g in &self.groups {
            h.update(g.prompt.prompt_id.to_le_bytes());
            h.update((g.prompt.target as u64).to_le_bytes());
            for r in &g.responses {
                for t in &r.tokens {
                    h.update((*t as u64).to_le_bytes());
                }
                for b in &r.behavior_logprobs {
                    h.update(b.to_le_bytes());
                }
                h.update(r.reward.to_le_bytes());
                h.update(r.advantage.unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Samples one response autoregressively at temperature 1.
pub fn generate_response(
    behavior: &PolicyParams,
    task: &TaskConfig,
    prompt: &Prompt,
    rng: &mut impl rand::Rng,
) -> Result<RolloutRecord> {
    let mut tokens = Vec::with_capacity(task.seq_len);
    let mut logprobs = Vec::with_capacity(task.seq_len);
    for _ in 0..task.seq_len {
        let f = env::features(task, prompt, &tokens)?;
        let lp = policy::log_softmax(behavior, &f)?;
        let probs: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
        let token = policy::sample_index(&probs, rng);
        logprobs.push(lp[token]);
        tokens.push(token);
    }
    let reward = env::verify(task, prompt, &tokens)?;
    Ok(RolloutRecord {
        prompt: *prompt,
        tokens,
        behavior_logprobs: logprobs,
        reward,
        advantage: None,
    })
}

pub fn generate_group(
    behavior: &PolicyParams,
    task: &TaskConfig,
    prompt: &Prompt,
    group_size: usize,
    rng: &mut impl rand::Rng,
) -> Result<PromptGroup> {
    if group_size < 2 {
        return Err(Error::precondition("group size must be at least 2"));
    }
    let responses = (0..group_size)
        .map(|_| generate_response(behavior, task, prompt, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptGroup {
        prompt: *prompt,
        responses,
    })
}

/// Group-relative advantages `(R - mean) / std` with the population std.
/// A zero-variance group gets all-zero advantages.
pub fn normalize_advantages(mut group: PromptGroup) -> PromptGroup {
    let n = group.responses.len() as f64;
    let mean = group.responses.iter().map(|r| r.reward).sum::<f64>() / n;
    let var = group
        .responses
        .iter()
        .map(|r| (r.reward - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    for r in &mut group.responses {
        r.advantage = Some(if std > 0.0 { (r.reward - mean) / std } else { 0.0 });
    }
    group
}

/// Builds `D_k`: prompts are drawn sequentially from the stage's prompt
/// stream, then group `i` is generated from an rng derived from
/// `(seed, stage_index, i)` so the worker count never changes the output.
pub fn build_stage_dataset(
    behavior: &PolicyParams,
    task: &TaskConfig,
    n_groups: usize,
    group_size: usize,
    seed: u64,
    stage_index: usize,
    prompts: &mut PromptSource,
) -> Result<StaleDataset> {
    if group_size < 2 {
        return Err(Error::precondition("group size must be at least 2"));
    }
    let mut prompt_rng = rng_for(seed, &[stream::PROMPTS, stage_index as u64]);
    let stage_prompts: Vec<Prompt> = (0..n_groups)
        .map(|_| prompts.sample_prompt(task, &mut prompt_rng))
        .collect();
    let groups = stage_prompts
        .par_iter()
        .enumerate()
        .map(|(i, prompt)| {
            let mut rng = rng_for(seed, &[stream::GROUPS, stage_index as u64, i as u64]);
            generate_group(behavior, task, prompt, group_size, &mut rng).map(normalize_advantages)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StaleDataset {
        stage_index,
        groups,
        behavior_policy_hash: behavior.digest(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    stage_index: usize,
    behavior_policy_hash: String,
    group: usize,
    prompt_id: u64,
    target: usize,
    tokens: Vec<Token>,
    behavior_logprobs: Vec<f64>,
    reward: f64,
    advantage: f64,
}

/// Writes one JSON object per response.
pub fn write_dataset(dataset: &StaleDataset, mut out: impl Write) -> std::io::Result<()> {
    for (gi, g) in dataset.groups.iter().enumerate() {
        for r in &g.responses {
            let line = DatasetLine {
                stage_index: dataset.stage_index,
                behavior_policy_hash: dataset.behavior_policy_hash.clone(),
                group: gi,
                prompt_id: r.prompt.prompt_id,
                target: r.prompt.target,
                tokens: r.tokens.clone(),
                behavior_logprobs: r.behavior_logprobs.clone(),
                reward: r.reward,
                advantage: r.advantage.unwrap_or(0.0),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Parses the line-delimited dataset format written by [`write_dataset`].
///
/// Lines sharing a `group` index must be contiguous; groups must be numbered
/// `0, 1, 2, ...` in file order.
pub fn read_dataset(input: impl BufRead) -> Result<StaleDataset> {
    let mut groups: Vec<PromptGroup> = Vec::new();
    let mut header: Option<(usize, String)> = None;
    for (idx, line) in input.lines().enumerate() {
        let lineno = idx + 1;
        let bad = |message: String| Error::Dataset { line: lineno, message };
        let line = line.map_err(|e| bad(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        match &header {
            None => header = Some((rec.stage_index, rec.behavior_policy_hash.clone())),
            Some((k, h)) if *k != rec.stage_index || *h != rec.behavior_policy_hash => {
                return Err(bad("stage_index or behavior_policy_hash changes mid-file".into()))
            }
            Some(_) => {}
        }
        if !rec.advantage.is_finite() {
            return Err(bad("advantage must be finite".into()));
        }
        if rec.reward != 0.0 && rec.reward != 1.0 {
            return Err(bad("reward must be 0 or 1".into()));
        }
        if rec.tokens.is_empty() {
            return Err(bad("empty response".into()));
        }
        let prompt = Prompt {
            target: rec.target,
            prompt_id: rec.prompt_id,
        };
        let record = RolloutRecord {
            prompt,
            tokens: rec.tokens,
            behavior_logprobs: rec.behavior_logprobs,
            reward: rec.reward,
            advantage: Some(rec.advantage),
        };
        record.validate().map_err(|e| bad(e.to_string()))?;
        if rec.group == groups.len() {
            groups.push(PromptGroup {
                prompt,
                responses: vec![record],
            });
        } else if rec.group + 1 == groups.len() {
            let g = groups.last_mut().expect("non-empty");
            if g.prompt != prompt {
                return Err(bad("prompt differs within a group".into()));
            }
            if g.responses[0].tokens.len() != record.tokens.len() {
                return Err(bad("response lengths differ within a group".into()));
            }
            g.responses.push(record);
        } else {
            return Err(bad(format!("group index {} out of order", rec.group)));
        }
    }
    if let Some(g) = groups.iter().find(|g| g.responses.len() < 2) {
        return Err(Error::Dataset {
            line: 0,
            message: format!("group for prompt {} has fewer than 2 responses", g.prompt.prompt_id),
        });
    }
    let (stage_index, behavior_policy_hash) = header.unwrap_or((0, String::new()));
    Ok(StaleDataset {
        stage_index,
        groups,
        behavior_policy_hash,
    })
}
