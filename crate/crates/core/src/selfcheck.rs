//! Fast internal consistency checks run by `mugrpo verify`.
//!
//! Each check recomputes a quantity along an independent path, such as
//! finite differences or brute-force enumeration, and compares.

use rand::Rng as _;
use serde::Serialize;

use crate::asyncsim::{simulate_async, simulate_staged, AsyncPolicyConfig, CostModel};
use crate::checkpoint;
use crate::config::{parse_config_str, preset_names};
use crate::env::{self, Prompt, TaskConfig};
use crate::orchestrator::StageSchedule;
use crate::policy::{grad_logprob, logprob, OptimizerState, PolicyParams, StateFeatures};
use crate::rollout::{normalize_advantages, PromptGroup, RolloutRecord};
use crate::seeding::rng_for;
use crate::theory::{evaluate_corollary, ChiSquare};
use crate::update::{compute_mask, UpdateConfig, VetoScope};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn gradient_check() -> CheckResult {
    let mut rng = rng_for(11, &[1]);
    let task = TaskConfig::default();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let params = PolicyParams::random(task.vocab_size(), task.feature_dim(), 1.0, &mut rng).expect("valid shape");
        let prompt = Prompt {
            target: rng.random_range(0..task.modulus),
            prompt_id: 0,
        };
        let prefix: Vec<usize> = (0..rng.random_range(0..task.seq_len)).map(|_| rng.random_range(0..task.digit_count)).collect();
        let f: StateFeatures = env::features(&task, &prompt, &prefix).expect("prefix shorter than horizon");
        let token = rng.random_range(0..task.digit_count);
        let g = grad_logprob(&params, &f, token).expect("finite");
        let h = 1e-5;
        for r in 0..params.vocab_size() {
            for c in 0..params.feature_dim() {
                let mut p = params.clone();
                let w = p.weights().get(r, c);
                p.weights_mut().set(r, c, w + h);
                let up = logprob(&p, &f, token).expect("finite");
                p.weights_mut().set(r, c, w - h);
                let down = logprob(&p, &f, token).expect("finite");
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g.get(r, c)).abs() / g.get(r, c).abs().max(1e-3);
                worst = worst.max(err);
            }
        }
    }
    check("score gradient vs finite differences", worst < 1e-6, format!("worst relative error {worst:.2e}"))
}

fn advantage_check() -> CheckResult {
    let prompt = Prompt { target: 0, prompt_id: 0 };
    let responses = [1.0, 1.0, 0.0, 0.0]
        .iter()
        .map(|&reward| RolloutRecord {
            prompt,
            tokens: vec![0],
            behavior_logprobs: vec![0.0],
            reward,
            advantage: None,
        })
        .collect();
    let g = normalize_advantages(PromptGroup { prompt, responses });
    let a: Vec<f64> = g.responses.iter().map(|r| r.advantage.unwrap_or(f64::NAN)).collect();
    check("group advantage normalization", a == [1.0, 1.0, -1.0, -1.0], format!("{a:?}"))
}

fn mask_check() -> CheckResult {
    let mut rng = rng_for(12, &[2]);
    let prompt = Prompt { target: 0, prompt_id: 0 };
    let mut failures = 0;
    for _ in 0..300 {
        let len = rng.random_range(1..10);
        let ratios: Vec<f64> = (0..len).map(|_| 10f64.powf(rng.random_range(-6.0..1.0))).collect();
        let advantage = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
        let tau = 10f64.powf(rng.random_range(-5.0..0.0));
        let record = RolloutRecord {
            prompt,
            tokens: vec![0; len],
            behavior_logprobs: vec![0.0; len],
            reward: 0.0,
            advantage: Some(advantage),
        };
        let kappa = (advantage < 0.0).then(|| ratios.iter().position(|r| *r < tau)).flatten();
        for scope in VetoScope::ALL {
            let cfg = UpdateConfig { scope, tau_c: tau, ..UpdateConfig::mu_grpo(0.1) };
            let keep = compute_mask(&record, &ratios, &cfg).expect("advantage set").keep;
            let expected: Vec<bool> = (0..len)
                .map(|t| match kappa {
                    None => true,
                    Some(k) => match scope {
                        VetoScope::NoMask => true,
                        VetoScope::TriggerOnly => ratios[t] >= tau,
                        VetoScope::Suffix => t <= k,
                        VetoScope::NonTriggerSuffix => t <= k || ratios[t] < tau,
                        VetoScope::Sequence => false,
                    },
                })
                .collect();
            if keep != expected {
                failures += 1;
            }
        }
    }
    check("veto scopes by enumeration", failures == 0, format!("{failures} mismatches over 1500 masks"))
}

fn theory_check() -> CheckResult {
    let row = match evaluate_corollary(0.5, 0.01, 0.5) {
        Ok(r) => r,
        Err(e) => return check("divergence bound instance", false, e.to_string()),
    };
    let closed = 0.5 + 0.5 * (0.5 / 0.01 + 0.25 / (1.0 - 0.005)) - 1.0;
    let chi = row.chi_square.finite().unwrap_or(f64::INFINITY);
    let ok = (chi - closed).abs() <= 1e-9 * closed
        && (row.simplified_bound - 24.5025).abs() <= 1e-9 * 24.5025
        && row.chain_holds
        && row.retained_local_ratio == 1.0
        && row.binomial_bound != ChiSquare::Infinite;
    check(
        "divergence bound instance",
        ok,
        format!("chi2 {chi:.6} (closed form {closed:.6}), simplified bound {:.6}", row.simplified_bound),
    )
}

fn schedule_check() -> CheckResult {
    let cost = |n_workers| CostModel {
        t_generate_group: 2.0,
        t_update: 1.0,
        t_sync: 0.0,
        n_workers,
        ..CostModel::default()
    };
    let cfg = AsyncPolicyConfig { sync_interval: 1, max_lag: None };
    let staged = simulate_staged(&StageSchedule::new(2, 4, 1, 8), &cost(1));
    let one = simulate_async(64, 1, &cost(1), &cfg);
    let two = simulate_async(64, 1, &cost(2), &cfg);
    let syncs = simulate_staged(&StageSchedule::new(1024, 4, 1, 8), &cost(4));
    match (staged, one, two, syncs) {
        (Ok(s), Ok(a), Ok(b), Ok(c)) => {
            let ok = s.idle_ratio == 2.0 / 3.0 && a.steady_idle_ratio == 0.5 && b.steady_idle_ratio == 0.0 && c.n_syncs == 1024;
            check(
                "scheduling hand timelines",
                ok,
                format!(
                    "staged {:.4}, async 1 worker {:.4}, async 2 workers {:.4}, syncs {}",
                    s.idle_ratio, a.steady_idle_ratio, b.steady_idle_ratio, c.n_syncs
                ),
            )
        }
        _ => check("scheduling hand timelines", false, "simulation failed".into()),
    }
}

fn round_trip_check() -> CheckResult {
    let mut bad = Vec::new();
    for name in preset_names() {
        match parse_config_str(&format!(r#"{{"preset": "{name}"}}"#), &[]) {
            Ok(c) if parse_config_str(&c.to_json(), &[]).ok().as_ref() == Some(&c) => {}
            _ => bad.push(name),
        }
    }
    let params = PolicyParams::random(4, 3, 1.0, &mut rng_for(13, &[3])).expect("valid shape");
    let opt = OptimizerState::new(&params);
    let ck_ok = checkpoint::encode(&params, &opt)
        .and_then(|b| checkpoint::decode(&b))
        .is_ok_and(|c| c.params == params && c.opt == opt);
    check(
        "config and checkpoint round trips",
        bad.is_empty() && ck_ok,
        if bad.is_empty() { format!("checkpoint ok: {ck_ok}") } else { format!("presets failing: {}", bad.join(", ")) },
    )
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        gradient_check(),
        advantage_check(),
        mask_check(),
        theory_check(),
        schedule_check(),
        round_trip_check(),
    ]
}
