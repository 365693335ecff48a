//! Modular digit-sum task with a binary verifier.
//!
//! A prompt carries a target residue; the policy emits exactly `seq_len`
//! digits and is rewarded iff their sum is congruent to the target modulo
//! `modulus`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{StateFeatures, Token};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub modulus: usize,
    pub seq_len: usize,
    pub digit_count: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            modulus: 8,
            seq_len: 6,
            digit_count: 8,
        }
    }
}

impl TaskConfig {
    pub fn new(modulus: usize, seq_len: usize, digit_count: usize) -> Result<Self> {
        let task = Self {
            modulus,
            seq_len,
            digit_count,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modulus < 2 {
            return Err(Error::config("task.modulus", "must be at least 2"));
        }
        if self.seq_len < 1 {
            return Err(Error::config("task.seq_len", "must be at least 1"));
        }
        if self.digit_count < 2 {
            return Err(Error::config("task.digit_count", "must be at least 2"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.digit_count
    }

    /// Total width of the one-hot blocks written by [`features`].
    pub fn feature_dim(&self) -> usize {
        2 * self.modulus + self.seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub target: usize,
    pub prompt_id: u64,
}

/// Hands out prompts with uniformly drawn targets and increasing ids.
#[derive(Debug, Clone, Default)]
pub struct PromptSource {
    next_id: u64,
}

impl PromptSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(next_id: u64) -> Self {
        Self { next_id }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn sample_prompt(&mut self, task: &TaskConfig, rng: &mut impl rand::Rng) -> Prompt {
        let prompt = Prompt {
            target: rng.random_range(0..task.modulus),
            prompt_id: self.next_id,
        };
        self.next_id += 1;
        prompt
    }
}

/// Encodes `(target, prefix digit-sum mod M, position)`.
///
/// The middle block stores the residue still needed, `(target - sum) mod M`,
/// which is a bijective relabelling of the running sum for a fixed target and
/// lets a linear policy express "emit the missing residue".
pub fn features(task: &TaskConfig, prompt: &Prompt, prefix: &[Token]) -> Result<StateFeatures> {
    if prefix.len() >= task.seq_len {
        return Err(Error::precondition(format!(
            "prefix length {} must be below seq_len {}",
            prefix.len(),
            task.seq_len
        )));
    }
    let m = task.modulus;
    let sum = prefix.iter().fold(0usize, |acc, &t| (acc + t) % m);
    let remaining = (prompt.target % m + m - sum) % m;
    let mut values = vec![0.0; task.feature_dim()];
    values[prompt.target % m] = 1.0;
    values[m + remaining] = 1.0;
    values[2 * m + prefix.len()] = 1.0;
    Ok(StateFeatures::new(values))
}

pub fn verify(task: &TaskConfig, prompt: &Prompt, tokens: &[Token]) -> Result<f64> {
    if tokens.len() != task.seq_len {
        return Err(Error::precondition(format!(
            "response has {} tokens, expected {}",
            tokens.len(),
            task.seq_len
        )));
    }
    let sum = tokens.iter().fold(0usize, |acc, &t| (acc + t) % task.modulus);
    Ok(if sum == prompt.target % task.modulus { 1.0 } else { 0.0 })
}
