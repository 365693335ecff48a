//! Dispatch from a validated [`RunConfig`] to the matching entry point,
//! writing every output into the run directory.

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::asyncsim::{simulate_async, simulate_staged, sweep_schedules, SweepRow};
use crate::checkpoint;
use crate::config::{Mode, RunConfig};
use crate::env::PromptSource;
use crate::error::{Error, Result};
use crate::orchestrator::{evaluate_policy, implied_staleness, run_fixed_dataset, run_staged_training, StageSchedule, TrainingOutcome, TrainingSetup};
use crate::policy::{OptimizerState, PolicyParams};
use crate::report::{emit_metrics, summarize, OutputSet};
use crate::rollout::{build_stage_dataset, read_dataset, write_dataset};
use crate::seeding::{rng_for, stream};
use crate::theory::evaluate_grid;
use crate::update::UpdateConfig;

/// Environment variable against which relative `output_dir` values resolve.
pub const OUTPUT_ROOT_VAR: &str = "MUGRPO_OUTPUT_ROOT";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
    /// Human-readable result lines.
    pub headline: Vec<String>,
}

pub fn resolve_output_dir(config: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if config.output_dir.is_relative() => PathBuf::from(root).join(&config.output_dir),
        _ => config.output_dir.clone(),
    }
}

/// Runs `config` on a pool of `threads` workers (all cores when `None`).
pub fn run_with_threads(config: &RunConfig, dir: &Path, threads: Option<usize>) -> Result<RunSummary> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::precondition(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in(config, dir))
}

pub fn run(config: &RunConfig) -> Result<RunSummary> {
    run_in(config, &resolve_output_dir(config))
}

/// Runs `config`, writing into `dir` regardless of `config.output_dir`.
pub fn run_in(config: &RunConfig, dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let mut out = OutputSet::create(dir)?;
    out.write("config.json", config.to_json().as_bytes())?;
    let headline = match config.mode {
        Mode::Staged => run_staged(config, &mut out)?,
        Mode::FixedDataset => run_fixed(config, &mut out)?,
        Mode::Asyncsim => run_asyncsim(config, &mut out)?,
        Mode::Theory => run_theory(config, &mut out)?,
        Mode::Eval => run_eval(config, &mut out)?,
    };
    let mode = serde_json::to_value(config.mode).expect("mode serializes");
    let files = out.finish(config.seed, mode.as_str().unwrap_or("unknown"))?;
    Ok(RunSummary {
        output_dir: dir.to_path_buf(),
        files,
        headline,
    })
}

fn initial_params(config: &RunConfig) -> Result<(PolicyParams, Option<OptimizerState>)> {
    if let Some(path) = &config.checkpoint {
        let bytes = std::fs::read(path).map_err(|source| Error::ReadFile { path: path.clone(), source })?;
        let ck = checkpoint::decode(&bytes)?;
        let (v, f) = (config.task.vocab_size(), config.task.feature_dim());
        if ck.params.vocab_size() != v || ck.params.feature_dim() != f {
            return Err(Error::config(
                "checkpoint",
                format!("checkpoint is {}x{}, task needs {v}x{f}", ck.params.vocab_size(), ck.params.feature_dim()),
            ));
        }
        return Ok((ck.params, Some(ck.opt)));
    }
    let (v, f) = (config.task.vocab_size(), config.task.feature_dim());
    let params = if config.init_scale == 0.0 {
        PolicyParams::zeros(v, f)?
    } else {
        PolicyParams::random(v, f, config.init_scale, &mut rng_for(config.seed, &[stream::INIT]))?
    };
    Ok((params, None))
}

fn setup(config: &RunConfig, update: UpdateConfig, init: PolicyParams) -> TrainingSetup {
    TrainingSetup {
        task: config.task,
        update,
        eval: config.eval_settings(),
        seed: config.seed,
        init,
    }
}

fn describe(outcome: &TrainingOutcome, label: &str) -> String {
    let s = summarize(&outcome.log);
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    format!(
        "{label}: {} updates, final stage reward {}, final eval {}, best eval {}, mean clip {:.4}, mean veto {:.4}, min E[rho|A<0] {}",
        s.n_updates,
        fmt(s.final_stage_reward),
        fmt(s.final_eval.map(|e| e.accuracy)),
        fmt(s.best_eval.map(|e| e.accuracy)),
        s.mean_clip_fraction,
        s.mean_veto_fraction,
        fmt(s.min_neg_adv_ratio),
    )
}

fn save_checkpoint(config: &RunConfig, outcome: &TrainingOutcome, out: &mut OutputSet, prefix: &str) -> Result<()> {
    if config.save_checkpoint {
        out.write(&format!("{prefix}checkpoint.bin"), &checkpoint::encode(&outcome.params, &outcome.opt)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct Variant {
    name: String,
    schedule: StageSchedule,
    update: UpdateConfig,
}

fn fmt_clip(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "inf".into()
    }
}

fn variants(config: &RunConfig) -> Vec<Variant> {
    let s = &config.sweep;
    let staleness = if s.staleness.is_empty() { vec![config.schedule.staleness] } else { s.staleness.clone() };
    let scopes = if s.scope.is_empty() { vec![config.update.scope] } else { s.scope.clone() };
    let taus = if s.tau_c.is_empty() { vec![config.update.tau_c] } else { s.tau_c.clone() };
    let highs: Vec<f64> = if s.clip_high.is_empty() {
        vec![config.update.clip_high]
    } else {
        s.clip_high.iter().map(|h| h.unwrap_or(f64::INFINITY)).collect()
    };
    let mut out = Vec::new();
    for &mu in &staleness {
        for &scope in &scopes {
            for &tau_c in &taus {
                for &clip_high in &highs {
                    let base = config.schedule;
                    let schedule = StageSchedule::new(base.total_updates / mu, mu, base.mini_batch_groups, base.group_size);
                    let update = UpdateConfig {
                        scope,
                        tau_c,
                        clip_high,
                        ..config.update
                    };
                    let name = format!("mu{mu}_{scope:?}_tau{tau_c:e}_hi{}", fmt_clip(clip_high));
                    out.push(Variant { name, schedule, update });
                }
            }
        }
    }
    out
}

fn run_staged(config: &RunConfig, out: &mut OutputSet) -> Result<Vec<String>> {
    let (init, _) = initial_params(config)?;
    if config.sweep.is_empty() {
        let outcome = run_staged_training(&config.schedule, &setup(config, config.update, init))?;
        emit_metrics(&outcome.log, out, "", config.plots)?;
        save_checkpoint(config, &outcome, out, "")?;
        return Ok(vec![describe(&outcome, "staged")]);
    }
    let mut csv = String::from(
        "variant,staleness,n_stages,scope,tau_c,clip_high,final_stage_reward,final_eval,best_eval,mean_clip_fraction,mean_veto_fraction,min_neg_adv_ratio\n",
    );
    let mut lines = Vec::new();
    for v in variants(config) {
        let outcome = run_staged_training(&v.schedule, &setup(config, v.update, init.clone()))?;
        let prefix = format!("{}/", v.name);
        emit_metrics(&outcome.log, out, &prefix, config.plots)?;
        save_checkpoint(config, &outcome, out, &prefix)?;
        let s = summarize(&outcome.log);
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{:?},{},{},{},{},{},{},{},{}",
            v.name,
            v.schedule.staleness,
            v.schedule.n_stages,
            v.update.scope,
            v.update.tau_c,
            fmt_clip(v.update.clip_high),
            opt(s.final_stage_reward),
            opt(s.final_eval.map(|e| e.accuracy)),
            opt(s.best_eval.map(|e| e.accuracy)),
            s.mean_clip_fraction,
            s.mean_veto_fraction,
            opt(s.min_neg_adv_ratio)
        );
        lines.push(describe(&outcome, &v.name));
    }
    out.write("sweep.csv", csv.as_bytes())?;
    Ok(lines)
}

fn run_fixed(config: &RunConfig, out: &mut OutputSet) -> Result<Vec<String>> {
    let fixed = config.fixed_dataset.as_ref().expect("validated");
    let (init, _) = initial_params(config)?;
    let dataset = match &fixed.dataset_path {
        Some(path) => {
            let file = std::fs::File::open(path).map_err(|source| Error::ReadFile { path: path.clone(), source })?;
            read_dataset(BufReader::new(file))?
        }
        None => build_stage_dataset(
            &init,
            &config.task,
            fixed.n_groups,
            config.schedule.group_size,
            config.seed,
            0,
            &mut PromptSource::new(),
        )?,
    };
    for &b in &fixed.mini_batch_groups {
        if b > dataset.n_groups() {
            return Err(Error::config(
                "fixed_dataset.mini_batch_groups",
                format!("{b} exceeds the dataset's {} groups", dataset.n_groups()),
            ));
        }
    }
    if fixed.dump_dataset {
        let mut buf = Vec::new();
        write_dataset(&dataset, &mut buf).map_err(|source| Error::WriteFile {
            path: out.dir().join("dataset.jsonl"),
            source,
        })?;
        out.write("dataset.jsonl", &buf)?;
    }
    let mut csv = String::from("mini_batch_groups,n_updates,implied_staleness,final_eval,best_eval,mean_clip_fraction,mean_veto_fraction\n");
    let mut lines = vec![format!(
        "dataset: {} groups, {} responses, mean reward {:.4}",
        dataset.n_groups(),
        dataset.n_responses(),
        dataset.mean_reward()
    )];
    for &b in &fixed.mini_batch_groups {
        let outcome = run_fixed_dataset(&dataset, b, &setup(config, config.update, init.clone()))?;
        let prefix = format!("bmini-{b}/");
        emit_metrics(&outcome.log, out, &prefix, config.plots)?;
        save_checkpoint(config, &outcome, out, &prefix)?;
        let s = summarize(&outcome.log);
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            csv,
            "{b},{},{},{},{},{},{}",
            s.n_updates,
            implied_staleness(dataset.n_groups(), b),
            opt(s.final_eval.map(|e| e.accuracy)),
            opt(s.best_eval.map(|e| e.accuracy)),
            s.mean_clip_fraction,
            s.mean_veto_fraction
        );
        lines.push(describe(&outcome, &format!("B_mini={b}")));
    }
    out.write("fixed_budget.csv", csv.as_bytes())?;
    Ok(lines)
}

fn schedule_csv(rows: &[SweepRow]) -> String {
    let mut csv = String::from(
        "mode,staleness,max_lag,n_workers,total_time,idle_ratio,steady_idle_ratio,n_syncs,n_produced,n_consumed,n_dropped,mean_lag\n",
    );
    for r in rows {
        let p = &r.report;
        let total: usize = p.lag_histogram.values().sum();
        let mean_lag = if total == 0 {
            0.0
        } else {
            p.lag_histogram.iter().map(|(l, c)| (*l * *c) as f64).sum::<f64>() / total as f64
        };
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.mode,
            opt(r.staleness),
            if r.mode == "async" { r.max_lag.map_or("inf".into(), |v| v.to_string()) } else { String::new() },
            r.n_workers,
            p.total_time,
            p.idle_ratio,
            p.steady_idle_ratio,
            p.n_syncs,
            p.n_produced,
            p.n_consumed,
            p.n_dropped,
            mean_lag
        );
    }
    csv
}

fn run_asyncsim(config: &RunConfig, out: &mut OutputSet) -> Result<Vec<String>> {
    let rows = match &config.asyncsim {
        Some(grid) => sweep_schedules(grid, &config.cost, &config.async_cfg)?,
        None => {
            let s = config.schedule;
            vec![
                SweepRow {
                    mode: "staged".into(),
                    staleness: Some(s.staleness),
                    max_lag: None,
                    n_workers: config.cost.n_workers,
                    report: simulate_staged(&s, &config.cost)?,
                },
                SweepRow {
                    mode: "async".into(),
                    staleness: None,
                    max_lag: config.async_cfg.max_lag,
                    n_workers: config.cost.n_workers,
                    report: simulate_async(s.total_updates, s.mini_batch_groups, &config.cost, &config.async_cfg)?,
                },
            ]
        }
    };
    out.write("schedules.csv", schedule_csv(&rows).as_bytes())?;
    out.write_json("schedules.json", &rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "{} mu={} max_lag={} workers={}: total time {:.2}, idle ratio {:.4}, syncs {}",
                r.mode,
                r.staleness.map_or("-".into(), |v| v.to_string()),
                r.max_lag.map_or("-".into(), |v| v.to_string()),
                r.n_workers,
                r.report.total_time,
                r.report.idle_ratio,
                r.report.n_syncs
            )
        })
        .collect())
}

fn run_theory(config: &RunConfig, out: &mut OutputSet) -> Result<Vec<String>> {
    let rows = evaluate_grid(&config.theory)?;
    let mut csv = String::from(
        "m,r,lambda2,chi_square,m_h,q_h,binomial_bound,simplified_bound,retained_local_ratio,reverse_chi_square,chain_holds\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.m,
            r.r,
            r.lambda2,
            r.chi_square,
            r.m_h,
            r.q_h,
            r.binomial_bound,
            r.simplified_bound,
            r.retained_local_ratio,
            r.reverse_chi_square,
            r.chain_holds
        );
    }
    out.write("theory.csv", csv.as_bytes())?;
    out.write_json("theory.json", &rows)?;
    let held = rows.iter().filter(|r| r.chain_holds).count();
    let mut lines = vec![format!("bound chain holds on {held}/{} grid points", rows.len())];
    for r in &rows {
        lines.push(format!(
            "m={} r={} lambda2={}: chi2 {:.4} >= binomial {:.4} >= simplified {:.4}",
            r.m,
            r.r,
            r.lambda2,
            r.chi_square.finite().unwrap_or(f64::INFINITY),
            r.binomial_bound.finite().unwrap_or(f64::INFINITY),
            r.simplified_bound
        ));
    }
    Ok(lines)
}

fn run_eval(config: &RunConfig, out: &mut OutputSet) -> Result<Vec<String>> {
    #[derive(Serialize)]
    struct EvalReport {
        accuracy: f64,
        n_prompts: usize,
        samples_per_prompt: usize,
        params_digest: String,
        step_count: Option<u64>,
    }
    let (params, opt) = initial_params(config)?;
    let accuracy = evaluate_policy(&params, &config.task, config.eval_prompts, config.eval_samples_per_prompt, config.seed)?;
    out.write_json(
        "eval.json",
        &EvalReport {
            accuracy,
            n_prompts: config.eval_prompts,
            samples_per_prompt: config.eval_samples_per_prompt,
            params_digest: params.digest(),
            step_count: opt.map(|o| o.step_count),
        },
    )?;
    Ok(vec![format!("accuracy {accuracy:.4}")])
}
