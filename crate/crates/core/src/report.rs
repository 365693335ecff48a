//! Run-directory outputs and the SHA-256 manifest that lists them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::orchestrator::{EvalPoint, MetricsLog};
use crate::plot::{line_chart, Scale, Series};

/// Collects files written into one run directory, recording their digests.
#[derive(Debug)]
pub struct OutputSet {
    dir: PathBuf,
    digests: BTreeMap<String, String>,
}

impl OutputSet {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|source| Error::WriteFile {
            path: dir.to_path_buf(),
            source,
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digests: BTreeMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` (which may contain `/`) relative to the run directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| Error::WriteFile {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        std::fs::write(&path, bytes).map_err(|source| Error::WriteFile { path, source })?;
        self.digests.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("report values serialize");
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.digests.keys().map(String::as_str)
    }

    /// Writes `manifest.json` listing every other file with its digest.
    pub fn finish(mut self, seed: u64, mode: &str) -> Result<Vec<String>> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            version: &'static str,
            mode: &'a str,
            seed: u64,
            files: &'a BTreeMap<String, String>,
        }
        let files = self.digests.clone();
        self.write_json(
            "manifest.json",
            &Manifest {
                version: env!("CARGO_PKG_VERSION"),
                mode,
                seed,
                files: &files,
            },
        )?;
        Ok(self.digests.into_keys().collect())
    }
}

pub fn metrics_jsonl(log: &MetricsLog) -> String {
    let mut out = String::new();
    for entry in &log.updates {
        out.push_str(&serde_json::to_string(entry).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

pub fn stages_csv(log: &MetricsLog) -> String {
    let mut out = String::from(
        "stage,n_updates,n_groups,n_responses,dataset_reward,mean_reward,mean_veto_fraction,mean_clip_fraction,behavior_policy_hash,dataset_checksum\n",
    );
    for s in &log.stages {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            s.stage,
            s.n_updates,
            s.n_groups,
            s.n_responses,
            s.dataset_reward,
            s.mean_reward,
            s.mean_veto_fraction,
            s.mean_clip_fraction,
            s.behavior_policy_hash,
            s.dataset_checksum
        );
    }
    out
}

/// Mean vetoed-token percentage per stage, one row per stage.
pub fn veto_table_csv(log: &MetricsLog) -> String {
    let mut out = String::from("stage,mean_vetoed_token_percent\n");
    for s in &log.stages {
        let _ = writeln!(out, "{},{:.4}", s.stage, 100.0 * s.mean_veto_fraction);
    }
    out
}

pub fn evals_csv(log: &MetricsLog) -> String {
    let mut out = String::from("update,accuracy\n");
    for e in &log.evals {
        let _ = writeln!(out, "{},{}", e.update, e.accuracy);
    }
    out
}

/// Headline numbers of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSummary {
    pub n_updates: usize,
    pub n_stages: usize,
    pub responses_generated: usize,
    pub final_stage_reward: Option<f64>,
    pub initial_eval: Option<EvalPoint>,
    pub final_eval: Option<EvalPoint>,
    pub best_eval: Option<EvalPoint>,
    pub mean_clip_fraction: f64,
    pub mean_veto_fraction: f64,
    pub min_neg_adv_ratio: Option<f64>,
    pub max_neg_adv_ratio: Option<f64>,
}

pub fn summarize(log: &MetricsLog) -> TrainingSummary {
    let n = log.updates.len().max(1) as f64;
    let negs: Vec<f64> = log.updates.iter().filter_map(|u| u.metrics.mean_neg_adv_ratio).collect();
    TrainingSummary {
        n_updates: log.updates.len(),
        n_stages: log.stages.len(),
        responses_generated: log.responses_generated,
        final_stage_reward: log.final_stage().map(|s| s.mean_reward),
        initial_eval: log.evals.first().copied(),
        final_eval: log.evals.last().copied(),
        best_eval: log.best_eval(),
        mean_clip_fraction: log.updates.iter().map(|u| u.metrics.clip_fraction).sum::<f64>() / n,
        mean_veto_fraction: log.updates.iter().map(|u| u.metrics.veto_fraction).sum::<f64>() / n,
        min_neg_adv_ratio: negs.iter().copied().reduce(f64::min),
        max_neg_adv_ratio: negs.iter().copied().reduce(f64::max),
    }
}

fn per_update(log: &MetricsLog, name: &str, f: impl Fn(&crate::update::UpdateMetrics) -> Option<f64>) -> Series {
    Series {
        name: name.into(),
        points: log.updates.iter().map(|u| (u.update as f64, f(&u.metrics))).collect(),
    }
}

/// `(file name, svg)` pairs for the standard training plots.
pub fn training_plots(log: &MetricsLog) -> Vec<(&'static str, String)> {
    let accuracy = Series {
        name: "eval accuracy".into(),
        points: log.evals.iter().map(|e| (e.update as f64, Some(e.accuracy))).collect(),
    };
    let reward = per_update(log, "batch reward", |m| Some(m.mean_reward));
    vec![
        ("accuracy.svg", line_chart("Accuracy", "update", "accuracy", &[accuracy, reward], Scale::Linear)),
        (
            "clip_fraction.svg",
            line_chart("Clipped token fraction", "update", "fraction", &[per_update(log, "clip", |m| Some(m.clip_fraction))], Scale::Linear),
        ),
        (
            "neg_adv_ratio.svg",
            line_chart(
                "Mean ratio on negative-advantage tokens",
                "update",
                "E[rho | A<0]",
                &[per_update(log, "E[rho|A<0]", |m| m.mean_neg_adv_ratio)],
                Scale::Log10,
            ),
        ),
        (
            "veto_fraction.svg",
            line_chart("Vetoed token fraction", "update", "fraction", &[per_update(log, "veto", |m| Some(m.veto_fraction))], Scale::Linear),
        ),
    ]
}

/// Writes the metrics of one training run under `prefix` (empty or ending in `/`).
pub fn emit_metrics(log: &MetricsLog, out: &mut OutputSet, prefix: &str, plots: bool) -> Result<()> {
    if log.updates.is_empty() {
        return Err(Error::precondition("cannot emit an empty metrics log"));
    }
    out.write(&format!("{prefix}metrics.jsonl"), metrics_jsonl(log).as_bytes())?;
    out.write(&format!("{prefix}stages.csv"), stages_csv(log).as_bytes())?;
    out.write(&format!("{prefix}veto_by_stage.csv"), veto_table_csv(log).as_bytes())?;
    out.write(&format!("{prefix}evals.csv"), evals_csv(log).as_bytes())?;
    out.write_json(&format!("{prefix}summary.json"), &summarize(log))?;
    if plots {
        for (name, svg) in training_plots(log) {
            out.write(&format!("{prefix}plots/{name}"), svg.as_bytes())?;
        }
    }
    Ok(())
}
