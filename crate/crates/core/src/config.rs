//! JSON run configuration with presets and `key=value` overrides.
//!
//! Command-line overrides win over the file, which wins over any preset named
//! by its `preset` key. Unknown keys are rejected and every error names the
//! offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::asyncsim::{AsyncPolicyConfig, CostModel, SweepGrid};
use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::orchestrator::{EvalSettings, StageSchedule};
use crate::theory::TheoryGrid;
use crate::update::{UpdateConfig, VetoScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Staged,
    FixedDataset,
    Asyncsim,
    Theory,
    Eval,
}

/// One generation phase reused by several minibatch sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedDatasetConfig {
    pub n_groups: usize,
    /// One training run per entry.
    pub mini_batch_groups: Vec<usize>,
    /// Read the dataset from this JSONL file instead of generating it.
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    /// Write the generated dataset next to the metrics.
    #[serde(default)]
    pub dump_dataset: bool,
}

/// Cartesian grid of staged-run variants. Empty axes keep the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    /// Staleness values; `n_stages` is adjusted to keep `total_updates` fixed.
    #[serde(default)]
    pub staleness: Vec<usize>,
    #[serde(default)]
    pub scope: Vec<VetoScope>,
    #[serde(default)]
    pub tau_c: Vec<f64>,
    /// Upper clip bounds; `null` means unbounded.
    #[serde(default)]
    pub clip_high: Vec<Option<f64>>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.staleness.is_empty() && self.scope.is_empty() && self.tau_c.is_empty() && self.clip_high.is_empty()
    }
}

fn default_schedule() -> StageSchedule {
    StageSchedule::new(4, 128, 8, 8)
}

fn default_update() -> UpdateConfig {
    UpdateConfig::mu_grpo(1e-2)
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

fn default_eval_prompts() -> usize {
    EvalSettings::default().n_prompts
}

fn default_eval_samples() -> usize {
    EvalSettings::default().samples_per_prompt
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default = "default_schedule")]
    pub schedule: StageSchedule,
    #[serde(default = "default_update")]
    pub update: UpdateConfig,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default)]
    pub async_cfg: AsyncPolicyConfig,
    /// Relative paths resolve against the output root.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Evaluate every this many updates (and at start and end); 0 disables
    /// evaluation. Unset means `total_updates / 20`.
    #[serde(default)]
    pub eval_interval: Option<usize>,
    #[serde(default = "default_eval_prompts")]
    pub eval_prompts: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples_per_prompt: usize,
    /// Half-width of the uniform initial weights; 0 starts from all zeros.
    #[serde(default)]
    pub init_scale: f64,
    /// Initial weights (or, in eval mode, the weights to evaluate) from this
    /// checkpoint; the optimizer always starts fresh.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Write the final parameters and optimizer state.
    #[serde(default)]
    pub save_checkpoint: bool,
    #[serde(default)]
    pub fixed_dataset: Option<FixedDatasetConfig>,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default)]
    pub theory: TheoryGrid,
    #[serde(default)]
    pub asyncsim: Option<SweepGrid>,
    #[serde(default = "default_true")]
    pub plots: bool,
}

impl RunConfig {
    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            interval: self
                .eval_interval
                .unwrap_or((self.schedule.total_updates / 20).max(1)),
            n_prompts: self.eval_prompts,
            samples_per_prompt: self.eval_samples_per_prompt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.update.validate()?;
        self.cost.validate()?;
        self.async_cfg.validate()?;
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale", "must be finite and non-negative"));
        }
        if self.eval_prompts == 0 {
            return Err(Error::config("eval_prompts", "must be at least 1"));
        }
        if self.eval_samples_per_prompt == 0 {
            return Err(Error::config("eval_samples_per_prompt", "must be at least 1"));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::config("output_dir", "must not be empty"));
        }
        match self.mode {
            Mode::Staged => {
                self.schedule.validate()?;
                self.validate_sweep()?;
            }
            Mode::FixedDataset => self.validate_fixed_dataset()?,
            Mode::Asyncsim => match &self.asyncsim {
                Some(grid) => {
                    if grid.n_workers.contains(&0) {
                        return Err(Error::config("asyncsim.n_workers", "entries must be at least 1"));
                    }
                    if grid.total_updates == 0 || grid.mini_batch_groups == 0 {
                        return Err(Error::config("asyncsim", "total_updates and mini_batch_groups must be positive"));
                    }
                }
                None => self.schedule.validate()?,
            },
            Mode::Theory => {
                let g = &self.theory;
                if g.m.is_empty() || g.r.is_empty() || g.lambda2.is_empty() {
                    return Err(Error::config("theory", "every grid axis needs at least one value"));
                }
                if g.m.iter().any(|m| !(*m > 0.0 && *m < 1.0)) {
                    return Err(Error::config("theory.m", "values must lie in (0, 1)"));
                }
                if g.r.iter().any(|r| !(*r > 0.0 && *r < 0.5)) {
                    return Err(Error::config("theory.r", "values must lie in (0, 1/2)"));
                }
                if g.lambda2.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
                    return Err(Error::config("theory.lambda2", "values must lie in (0, 1)"));
                }
            }
            Mode::Eval => {}
        }
        Ok(())
    }

    fn validate_sweep(&self) -> Result<()> {
        let s = &self.sweep;
        for &mu in &s.staleness {
            if mu == 0 || self.schedule.total_updates % mu != 0 {
                return Err(Error::config(
                    "sweep.staleness",
                    format!("{mu} must be positive and divide schedule.total_updates"),
                ));
            }
        }
        for &tau in &s.tau_c {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::config("sweep.tau_c", "values must satisfy 0 < tau_c < 1"));
            }
        }
        for hi in s.clip_high.iter().flatten() {
            if !(*hi > 1.0) {
                return Err(Error::config("sweep.clip_high", "values must be greater than 1"));
            }
        }
        Ok(())
    }

    fn validate_fixed_dataset(&self) -> Result<()> {
        let Some(f) = &self.fixed_dataset else {
            return Err(Error::config("fixed_dataset", "required when mode is fixed_dataset"));
        };
        if f.dataset_path.is_none() && f.n_groups == 0 {
            return Err(Error::config("fixed_dataset.n_groups", "must be at least 1"));
        }
        if f.mini_batch_groups.is_empty() {
            return Err(Error::config("fixed_dataset.mini_batch_groups", "needs at least one entry"));
        }
        for &b in &f.mini_batch_groups {
            if b == 0 || (f.dataset_path.is_none() && b > f.n_groups) {
                return Err(Error::config(
                    "fixed_dataset.mini_batch_groups",
                    format!("{b} must lie in 1..=n_groups"),
                ));
            }
        }
        if self.schedule.group_size < 2 {
            return Err(Error::config("schedule.group_size", "must be at least 2"));
        }
        Ok(())
    }

    /// Canonical JSON form; parsing it yields the same configuration.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("configuration serializes");
        s.push('\n');
        s
    }
}

macro_rules! presets {
    ($($name:literal),* $(,)?) => {
        /// Shipped presets as `(name, json)` pairs.
        pub const PRESETS: &[(&str, &str)] = &[
            $(($name, include_str!(concat!("../presets/", $name, ".json")))),*
        ];
    };
}

presets!(
    "grpo-baseline",
    "grpo-stale",
    "mu-grpo",
    "mu-grpo-low-staleness",
    "mask-trigger-only",
    "mask-suffix",
    "mask-non-trigger-suffix",
    "mask-sequence",
    "ablation-scope",
    "ablation-threshold",
    "ablation-clip-high",
    "fixed-generation-budget",
    "fixed-optimization-budget",
    "async",
    "theory-corollary",
    "reference-tight-clip",
    "reference-relaxed-nomask",
    "reference-mu-grpo",
);

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

pub fn preset_json(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, j)| *j)
        .ok_or_else(|| {
            Error::config(
                "preset",
                format!("unknown preset `{name}`; available: {}", preset_names().collect::<Vec<_>>().join(", ")),
            )
        })
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Map<String, Value>, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        return Err(Error::config(assignment, "override must have the form key=value"));
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "override key has an empty segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = root;
    for p in parents {
        let slot = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
        if !slot.is_object() {
            *slot = Value::Object(Map::new());
        }
        node = slot.as_object_mut().expect("just made an object");
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_object(text: &str, origin: &str) -> Result<Map<String, Value>> {
    if text.trim().is_empty() {
        return Ok(Map::new());
    }
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(Error::ConfigSyntax(format!("{origin}: top level must be a JSON object"))),
        Err(e) => Err(Error::ConfigSyntax(format!("{origin}: {e}"))),
    }
}

const REQUIRED: [&str; 2] = ["mode", "seed"];

/// Resolves presets and overrides, then deserializes and validates.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut user = parse_object(text, "config")?;
    for o in overrides {
        apply_override(&mut user, o)?;
    }
    let mut merged = match user.remove("preset") {
        None => Value::Object(Map::new()),
        Some(Value::String(name)) => Value::Object(parse_object(preset_json(&name)?, &name)?),
        Some(_) => return Err(Error::config("preset", "must be a string")),
    };
    merge(&mut merged, Value::Object(user));
    let obj = merged.as_object().expect("merge of objects is an object");
    let missing: Vec<String> = REQUIRED.iter().filter(|k| !obj.contains_key(**k)).map(|k| k.to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::MissingKeys(missing));
    }
    let config: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::ReadFile {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config_str(&text, overrides)
}
