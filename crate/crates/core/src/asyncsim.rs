//! Deterministic discrete-event model of rollout/trainer scheduling.
//!
//! Only timing and policy versions are tracked; no learning happens here.
//! Time is in abstract units set by a [`CostModel`]. Versions count completed
//! trainer updates, and the lag of a consumed sample is the trainer version at
//! consumption minus the version the producing worker held when it started
//! the group.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::StageSchedule;
use crate::seeding::{rng_for, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub t_generate_group: f64,
    pub t_update: f64,
    pub t_sync: f64,
    pub n_workers: usize,
    /// Relative half-width of uniform multiplicative jitter on generation time.
    #[serde(default)]
    pub jitter: f64,
    #[serde(default)]
    pub jitter_seed: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            t_generate_group: 2.0,
            t_update: 1.0,
            t_sync: 0.0,
            n_workers: 1,
            jitter: 0.0,
            jitter_seed: 0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("cost.t_generate_group", self.t_generate_group),
            ("cost.t_update", self.t_update),
            ("cost.t_sync", self.t_sync),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if self.n_workers == 0 {
            return Err(Error::config("cost.n_workers", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::config("cost.jitter", "must lie in [0, 1)"));
        }
        Ok(())
    }

    fn jitter_rng(&self) -> Rng {
        rng_for(self.jitter_seed, &[stream::JITTER])
    }

    fn generation_time(&self, rng: &mut Rng) -> f64 {
        if self.jitter == 0.0 {
            self.t_generate_group
        } else {
            self.t_generate_group * (1.0 + self.jitter * (2.0 * rng.random::<f64>() - 1.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsyncPolicyConfig {
    pub sync_interval: usize,
    /// Largest accepted lag in updates; `null` accepts any lag.
    pub max_lag: Option<usize>,
}

impl Default for AsyncPolicyConfig {
    fn default() -> Self {
        Self {
            sync_interval: 4,
            max_lag: None,
        }
    }
}

impl AsyncPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sync_interval == 0 {
            return Err(Error::config("async_cfg.sync_interval", "must be at least 1"));
        }
        // Samples started right after a publish reach lag `sync_interval - 1`
        // before the next publish; a tighter cap starves the trainer forever.
        if let Some(m) = self.max_lag {
            if m + 1 < self.sync_interval {
                return Err(Error::config(
                    "async_cfg.max_lag",
                    format!("must be at least sync_interval - 1 = {}", self.sync_interval - 1),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsyncReport {
    pub total_time: f64,
    pub trainer_busy_time: f64,
    pub trainer_idle_time: f64,
    pub trainer_sync_time: f64,
    /// `trainer_idle_time / total_time` over the whole run, warm-up included.
    pub idle_ratio: f64,
    /// Idle fraction over the second half of the updates.
    pub steady_idle_ratio: f64,
    pub n_updates: usize,
    pub n_syncs: usize,
    pub n_produced: usize,
    pub n_consumed: usize,
    pub n_dropped: usize,
    pub lag_histogram: BTreeMap<usize, usize>,
}

/// Per-update wall-time split, used to derive both ratios.
#[derive(Debug, Clone, Copy, Default)]
struct StepTime {
    idle: f64,
    busy: f64,
    sync: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn summarize(steps: &[StepTime], total_time: f64) -> (f64, f64, f64, f64, f64) {
    let idle: f64 = steps.iter().map(|s| s.idle).sum();
    let busy: f64 = steps.iter().map(|s| s.busy).sum();
    let sync: f64 = steps.iter().map(|s| s.sync).sum();
    let tail = &steps[steps.len() / 2..];
    let tail_idle: f64 = tail.iter().map(|s| s.idle).sum();
    let tail_total: f64 = tail.iter().map(|s| s.idle + s.busy + s.sync).sum();
    (busy, idle, sync, ratio(idle, total_time), ratio(tail_idle, tail_total))
}

/// Synchronous staged execution: each cycle syncs weights once, generates
/// `B_train` groups with perfect worker parallelism while the trainer
/// idles, then runs `staleness` updates.
pub fn simulate_staged(schedule: &StageSchedule, cost: &CostModel) -> Result<AsyncReport> {
    schedule.validate()?;
    cost.validate()?;
    let mut rng = cost.jitter_rng();
    let mut steps = Vec::with_capacity(schedule.total_updates);
    let mut clock = 0.0;
    let mut lag_histogram = BTreeMap::new();
    let b_train = schedule.groups_per_stage();
    for _ in 0..schedule.n_stages {
        let generation: f64 = (0..b_train).map(|_| cost.generation_time(&mut rng)).sum::<f64>() / cost.n_workers as f64;
        clock += cost.t_sync + generation;
        for j in 0..schedule.staleness {
            let mut step = StepTime {
                busy: cost.t_update,
                ..Default::default()
            };
            if j == 0 {
                step.idle = generation;
                step.sync = cost.t_sync;
            }
            clock += cost.t_update;
            steps.push(step);
            *lag_histogram.entry(j).or_insert(0) += schedule.mini_batch_groups;
        }
    }
    let (busy, idle, sync, idle_ratio, steady_idle_ratio) = summarize(&steps, clock);
    let produced = schedule.n_stages * b_train;
    Ok(AsyncReport {
        total_time: clock,
        trainer_busy_time: busy,
        trainer_idle_time: idle,
        trainer_sync_time: sync,
        idle_ratio,
        steady_idle_ratio,
        n_updates: schedule.total_updates,
        n_syncs: schedule.n_stages,
        n_produced: produced,
        n_consumed: produced,
        n_dropped: 0,
        lag_histogram,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    UpdateDone,
    SyncDone,
    GroupDone(usize),
}

impl EventKind {
    /// Trainer is entity 0, worker `w` is entity `w + 1`.
    fn entity(&self) -> usize {
        match self {
            EventKind::UpdateDone | EventKind::SyncDone => 0,
            EventKind::GroupDone(w) => w + 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl Event {
    fn key(&self) -> (f64, usize, u64) {
        (self.time, self.kind.entity(), self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest (time, entity, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        let (a, b) = (self.key(), other.key());
        b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(b.2.cmp(&a.2))
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    version: usize,
}

struct AsyncSim<'a> {
    cost: &'a CostModel,
    cfg: &'a AsyncPolicyConfig,
    total_updates: usize,
    mini_batch_groups: usize,
    rng: Rng,
    events: BinaryHeap<Event>,
    seq: u64,
    queue: VecDeque<Sample>,
    worker_version: Vec<usize>,
    published: usize,
    trainer_version: usize,
    waiting_since: Option<f64>,
    steps: Vec<StepTime>,
    n_syncs: usize,
    n_produced: usize,
    n_consumed: usize,
    n_dropped: usize,
    lag_histogram: BTreeMap<usize, usize>,
}

impl<'a> AsyncSim<'a> {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event { time, seq: self.seq, kind });
    }

    fn start_group(&mut self, worker: usize, now: f64) {
        self.worker_version[worker] = self.published;
        let dt = self.cost.generation_time(&mut self.rng);
        self.push(now + dt, EventKind::GroupDone(worker));
    }

    /// Starts an update at `now` if a full minibatch of acceptable samples is queued.
    fn try_start_update(&mut self, now: f64) {
        let Some(since) = self.waiting_since else { return };
        let v = self.trainer_version;
        let max_lag = self.cfg.max_lag;
        while let Some(front) = self.queue.front() {
            if max_lag.is_some_and(|m| v - front.version > m) {
                self.queue.pop_front();
                self.n_dropped += 1;
            } else {
                break;
            }
        }
        // Over-lag samples behind the front are dropped when they reach it;
        // count only those that would be accepted now.
        let acceptable = self
            .queue
            .iter()
            .filter(|s| max_lag.is_none_or(|m| v - s.version <= m))
            .take(self.mini_batch_groups)
            .count();
        if acceptable < self.mini_batch_groups {
            return;
        }
        let mut taken = 0;
        while taken < self.mini_batch_groups {
            let s = self.queue.pop_front().expect("counted above");
            let lag = v - s.version;
            if max_lag.is_some_and(|m| lag > m) {
                self.n_dropped += 1;
                continue;
            }
            *self.lag_histogram.entry(lag).or_insert(0) += 1;
            self.n_consumed += 1;
            taken += 1;
        }
        self.waiting_since = None;
        self.steps.push(StepTime {
            idle: now - since,
            busy: self.cost.t_update,
            sync: 0.0,
        });
        self.push(now + self.cost.t_update, EventKind::UpdateDone);
    }

    fn run(mut self) -> AsyncReport {
        for w in 0..self.cost.n_workers {
            self.start_group(w, 0.0);
        }
        self.waiting_since = Some(0.0);
        self.try_start_update(0.0);
        let mut end_time = 0.0;
        while let Some(ev) = self.events.pop() {
            let now = ev.time;
            match ev.kind {
                EventKind::GroupDone(w) => {
                    self.queue.push_back(Sample {
                        version: self.worker_version[w],
                    });
                    self.n_produced += 1;
                    self.start_group(w, now);
                    self.try_start_update(now);
                }
                EventKind::UpdateDone => {
                    self.trainer_version += 1;
                    if self.trainer_version == self.total_updates {
                        end_time = now;
                        break;
                    }
                    if self.trainer_version % self.cfg.sync_interval == 0 {
                        self.n_syncs += 1;
                        self.steps.last_mut().expect("an update ran").sync = self.cost.t_sync;
                        self.push(now + self.cost.t_sync, EventKind::SyncDone);
                    } else {
                        self.waiting_since = Some(now);
                        self.try_start_update(now);
                    }
                }
                EventKind::SyncDone => {
                    self.published = self.trainer_version;
                    self.waiting_since = Some(now);
                    self.try_start_update(now);
                }
            }
        }
        let (busy, idle, sync, idle_ratio, steady_idle_ratio) = summarize(&self.steps, end_time);
        AsyncReport {
            total_time: end_time,
            trainer_busy_time: busy,
            trainer_idle_time: idle,
            trainer_sync_time: sync,
            idle_ratio,
            steady_idle_ratio,
            n_updates: self.trainer_version,
            n_syncs: self.n_syncs,
            n_produced: self.n_produced,
            n_consumed: self.n_consumed,
            n_dropped: self.n_dropped,
            lag_histogram: self.lag_histogram,
        }
    }
}

/// Fully asynchronous execution: workers generate continuously and push to
/// a FIFO queue; the trainer consumes `mini_batch_groups` samples per update,
/// dropping samples whose lag exceeds `max_lag`. Every `sync_interval`
/// updates (except after the last) the trainer pays `t_sync` and publishes
/// its version; workers pick it up when they start their next group.
pub fn simulate_async(
    total_updates: usize,
    mini_batch_groups: usize,
    cost: &CostModel,
    cfg: &AsyncPolicyConfig,
) -> Result<AsyncReport> {
    cost.validate()?;
    cfg.validate()?;
    if total_updates == 0 || mini_batch_groups == 0 {
        return Err(Error::precondition("total_updates and mini_batch_groups must be positive"));
    }
    if cost.t_generate_group <= 0.0 {
        return Err(Error::config("cost.t_generate_group", "asynchronous simulation needs positive generation time"));
    }
    let sim = AsyncSim {
        cost,
        cfg,
        total_updates,
        mini_batch_groups,
        rng: cost.jitter_rng(),
        events: BinaryHeap::new(),
        seq: 0,
        queue: VecDeque::new(),
        worker_version: vec![0; cost.n_workers],
        published: 0,
        trainer_version: 0,
        waiting_since: None,
        steps: Vec::with_capacity(total_updates),
        n_syncs: 0,
        n_produced: 0,
        n_consumed: 0,
        n_dropped: 0,
        lag_histogram: BTreeMap::new(),
    };
    Ok(sim.run())
}

/// Grid of scheduling configurations to compare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub total_updates: usize,
    pub mini_batch_groups: usize,
    #[serde(default)]
    pub group_size: Option<usize>,
    /// Staged runs, one per staleness value (must divide `total_updates`).
    #[serde(default)]
    pub staleness: Vec<usize>,
    /// Asynchronous runs, one per lag cap.
    #[serde(default)]
    pub max_lag: Vec<Option<usize>>,
    pub n_workers: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    pub staleness: Option<usize>,
    pub max_lag: Option<usize>,
    pub n_workers: usize,
    pub report: AsyncReport,
}

pub fn sweep_schedules(grid: &SweepGrid, cost: &CostModel, async_cfg: &AsyncPolicyConfig) -> Result<Vec<SweepRow>> {
    if grid.n_workers.is_empty() || (grid.staleness.is_empty() && grid.max_lag.is_empty()) {
        return Err(Error::config("asyncsim.grid", "grid must contain at least one point"));
    }
    let mut rows = Vec::new();
    for &n_workers in &grid.n_workers {
        let cost = CostModel { n_workers, ..*cost };
        for &mu in &grid.staleness {
            if mu == 0 || grid.total_updates % mu != 0 {
                return Err(Error::config("asyncsim.grid.staleness", format!("{mu} does not divide total_updates")));
            }
            let schedule = StageSchedule::new(grid.total_updates / mu, mu, grid.mini_batch_groups, grid.group_size.unwrap_or(8));
            rows.push(SweepRow {
                mode: "staged".into(),
                staleness: Some(mu),
                max_lag: None,
                n_workers,
                report: simulate_staged(&schedule, &cost)?,
            });
        }
        for &max_lag in &grid.max_lag {
            let cfg = AsyncPolicyConfig { max_lag, ..*async_cfg };
            rows.push(SweepRow {
                mode: "async".into(),
                staleness: None,
                max_lag,
                n_workers,
                report: simulate_async(grid.total_updates, grid.mini_batch_groups, &cost, &cfg)?,
            });
        }
    }
    Ok(rows)
}
