//! Exact enumeration of token-occurrence measures on small finite scenarios.
//!
//! A scenario fixes weighted prompts with fixed-horizon trajectories plus
//! position weights `lambda`. Each trajectory stores per-token conditionals
//! under the behavior policy `beta` and the current policy `pi`. Two measures over
//! `(prompt, trajectory, position)` atoms are built from it:
//!
//! - behavior occupancy: `D(x) * lambda_t * beta(y | x)`
//! - current-prefix occupancy: `D(x) * lambda_t * pi(a_<t | x) * beta(a_t.. | x, a_<t)`
//!
//! Their Pearson chi-square divergences and the trigger-event masses that
//! lower-bound them are computed exactly, with infinity as an explicit value.

use serde::{Deserialize, Serialize, Serializer};

use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;
use crate::policy::PolicyParams;
use crate::rollout::StaleDataset;
use crate::update::{find_trigger, importance_ratios};

const MASS_TOL: f64 = 1e-12;

/// Tolerance of the two-path reverse-direction identity.
pub const REVERSE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tokens: Vec<usize>,
    /// `beta(a_t | x, a_<t)` for each position.
    pub behavior: Vec<f64>,
    /// `pi(a_t | x, a_<t)` for each position.
    pub current: Vec<f64>,
    /// Sign of the trajectory's advantage; only `< 0` matters for triggers.
    pub advantage: f64,
}

impl Trajectory {
    pub fn behavior_prob(&self) -> f64 {
        self.behavior.iter().product()
    }

    pub fn current_prob(&self) -> f64 {
        self.current.iter().product()
    }

    /// Local ratios `pi / beta` per position (infinite where `beta = 0 < pi`).
    pub fn local_ratios(&self) -> Vec<f64> {
        self.behavior
            .iter()
            .zip(&self.current)
            .map(|(b, p)| if *b == 0.0 && *p == 0.0 { 1.0 } else { p / b })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPrompt {
    pub weight: f64,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteScenario {
    pub prompts: Vec<ScenarioPrompt>,
    /// Position weights, one per token position.
    pub lambda: Vec<f64>,
}

fn prob_in_unit(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl FiniteScenario {
    pub fn horizon(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.horizon();
        if t == 0 || self.prompts.is_empty() {
            return Err(Error::precondition("scenario needs at least one prompt and one position"));
        }
        if self.lambda.iter().any(|l| !prob_in_unit(*l)) || (pairwise_sum(&self.lambda) - 1.0).abs() > MASS_TOL {
            return Err(Error::precondition("position weights must be a distribution"));
        }
        let weights: Vec<f64> = self.prompts.iter().map(|p| p.weight).collect();
        if weights.iter().any(|w| !prob_in_unit(*w)) || (pairwise_sum(&weights) - 1.0).abs() > MASS_TOL {
            return Err(Error::precondition("prompt weights must be a distribution"));
        }
        for (i, prompt) in self.prompts.iter().enumerate() {
            for traj in &prompt.trajectories {
                if traj.tokens.len() != t || traj.behavior.len() != t || traj.current.len() != t {
                    return Err(Error::precondition(format!("prompt {i}: trajectory length differs from horizon {t}")));
                }
                if traj.behavior.iter().chain(&traj.current).any(|p| !prob_in_unit(*p)) {
                    return Err(Error::precondition(format!("prompt {i}: conditional outside [0, 1]")));
                }
            }
            let b: Vec<f64> = prompt.trajectories.iter().map(Trajectory::behavior_prob).collect();
            let c: Vec<f64> = prompt.trajectories.iter().map(Trajectory::current_prob).collect();
            if (pairwise_sum(&b) - 1.0).abs() > MASS_TOL || (pairwise_sum(&c) - 1.0).abs() > MASS_TOL {
                return Err(Error::precondition(format!("prompt {i}: trajectory probabilities do not sum to 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AtomKey {
    pub prompt: usize,
    pub trajectory: usize,
    /// 1-based token position.
    pub position: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub key: AtomKey,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMeasure {
    pub atoms: Vec<Atom>,
}

impl OccupancyMeasure {
    pub fn total_mass(&self) -> f64 {
        pairwise_sum(&self.atoms.iter().map(|a| a.mass).collect::<Vec<_>>())
    }

    pub fn mass_of(&self, key: AtomKey) -> Option<f64> {
        self.atoms.iter().find(|a| a.key == key).map(|a| a.mass)
    }

    /// Total mass over atoms selected by `keep`.
    pub fn mass_where(&self, keep: impl Fn(&AtomKey) -> bool) -> f64 {
        pairwise_sum(&self.atoms.iter().filter(|a| keep(&a.key)).map(|a| a.mass).collect::<Vec<_>>())
    }
}

/// A divergence value that may be infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChiSquare {
    Finite(f64),
    Infinite,
}

impl ChiSquare {
    pub fn is_infinite(&self) -> bool {
        matches!(self, ChiSquare::Infinite)
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            ChiSquare::Finite(v) => Some(*v),
            ChiSquare::Infinite => None,
        }
    }

    /// `self >= other`, with infinity above every finite value.
    pub fn at_least(&self, other: &ChiSquare) -> bool {
        match (self, other) {
            (ChiSquare::Infinite, _) => true,
            (ChiSquare::Finite(_), ChiSquare::Infinite) => false,
            (ChiSquare::Finite(a), ChiSquare::Finite(b)) => a >= b,
        }
    }
}

impl std::fmt::Display for ChiSquare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ChiSquare::Finite(v) => write!(f, "{v}"),
            ChiSquare::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for ChiSquare {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ChiSquare::Finite(v) => s.serialize_f64(*v),
            ChiSquare::Infinite => s.serialize_str("inf"),
        }
    }
}

/// `R_{t-1} = prod_{j < t} ratios[j - 1]` for 1-based `t`.
pub fn prefix_ratio(ratios: &[f64], t: usize) -> Result<f64> {
    if t == 0 || t > ratios.len() + 1 {
        return Err(Error::precondition(format!("position {t} outside 1..={}", ratios.len() + 1)));
    }
    Ok(ratios[..t - 1].iter().product())
}

fn build_measure(s: &FiniteScenario, mass: impl Fn(&Trajectory, usize) -> f64) -> Result<OccupancyMeasure> {
    s.validate()?;
    let mut atoms = Vec::new();
    for (i, prompt) in s.prompts.iter().enumerate() {
        for (j, traj) in prompt.trajectories.iter().enumerate() {
            for (t0, lambda) in s.lambda.iter().enumerate() {
                atoms.push(Atom {
                    key: AtomKey {
                        prompt: i,
                        trajectory: j,
                        position: t0 + 1,
                    },
                    mass: prompt.weight * lambda * mass(traj, t0),
                });
            }
        }
    }
    Ok(OccupancyMeasure { atoms })
}

pub fn behavior_occupancy(s: &FiniteScenario) -> Result<OccupancyMeasure> {
    build_measure(s, |traj, _| traj.behavior_prob())
}

pub fn current_prefix_occupancy(s: &FiniteScenario) -> Result<OccupancyMeasure> {
    build_measure(s, |traj, t0| {
        let prefix: f64 = traj.current[..t0].iter().product();
        let suffix: f64 = traj.behavior[t0..].iter().product();
        prefix * suffix
    })
}

/// `chi^2(P || Q) = sum (p - q)^2 / q`, infinite when some atom has `q = 0 < p`.
///
/// Both measures must list the same atoms in the same order.
pub fn chi_square(p: &OccupancyMeasure, q: &OccupancyMeasure) -> Result<ChiSquare> {
    if p.atoms.len() != q.atoms.len() || p.atoms.iter().zip(&q.atoms).any(|(a, b)| a.key != b.key) {
        return Err(Error::precondition("measures are defined over different atoms"));
    }
    let mut terms = Vec::with_capacity(p.atoms.len());
    for (a, b) in p.atoms.iter().zip(&q.atoms) {
        if b.mass == 0.0 {
            if a.mass > 0.0 {
                return Ok(ChiSquare::Infinite);
            }
            continue;
        }
        let d = a.mass - b.mass;
        terms.push(d * d / b.mass);
    }
    Ok(ChiSquare::Finite(pairwise_sum(&terms)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TheoremBounds {
    /// `(m_H - q_H)^2 / (q_H (1 - q_H))`.
    pub binomial: ChiSquare,
    /// `m_H (1 - r)^2 / r`.
    pub simplified: f64,
}

/// Lower bounds on `chi^2(behavior || current-prefix)` from the masses of an
/// event under both measures, given `q_H <= r m_H`.
pub fn theorem_bounds(m_h: f64, q_h: f64, r: f64) -> Result<TheoremBounds> {
    if !(m_h > 0.0 && m_h <= 1.0) {
        return Err(Error::precondition(format!("m_H = {m_h} outside (0, 1]")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::precondition(format!("r = {r} outside (0, 1)")));
    }
    // Relative slack absorbs rounding when q_H is computed as r * m_H in another order.
    if !(q_h >= 0.0) || q_h > r * m_h * (1.0 + 1e-12) {
        return Err(Error::precondition(format!("q_H = {q_h} exceeds r * m_H = {}", r * m_h)));
    }
    let binomial = if q_h == 0.0 {
        ChiSquare::Infinite
    } else {
        let d = m_h - q_h;
        ChiSquare::Finite(d * d / (q_h * (1.0 - q_h)))
    };
    Ok(TheoremBounds {
        binomial,
        simplified: m_h * (1.0 - r) * (1.0 - r) / r,
    })
}

/// The two-position, one-prompt construction: first token `c` with
/// `beta(c) = m`, `pi(c) = r m`, otherwise `b`; after `c` the token `h` is
/// forced and after `b` the token `d` is forced under both policies. The
/// `(c, h)` trajectory carries a negative advantage.
pub fn corollary_scenario(m: f64, r: f64, lambda2: f64) -> Result<FiniteScenario> {
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::precondition(format!("m = {m} outside (0, 1)")));
    }
    if !(r > 0.0 && r < 0.5) {
        return Err(Error::precondition(format!("r = {r} outside (0, 1/2)")));
    }
    if !(lambda2 > 0.0 && lambda2 < 1.0) {
        return Err(Error::precondition(format!("lambda2 = {lambda2} outside (0, 1)")));
    }
    const C: usize = 0;
    const B: usize = 1;
    const H: usize = 2;
    const D: usize = 3;
    Ok(FiniteScenario {
        prompts: vec![ScenarioPrompt {
            weight: 1.0,
            trajectories: vec![
                Trajectory {
                    tokens: vec![C, H],
                    behavior: vec![m, 1.0],
                    current: vec![r * m, 1.0],
                    advantage: -1.0,
                },
                Trajectory {
                    tokens: vec![B, D],
                    behavior: vec![1.0 - m, 1.0],
                    current: vec![1.0 - r * m, 1.0],
                    advantage: 1.0,
                },
            ],
        }],
        lambda: vec![1.0 - lambda2, lambda2],
    })
}

/// Masses of the post-trigger event under both measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventMasses {
    /// Behavior mass of the event.
    pub m_h: f64,
    /// Current-prefix mass of the event.
    pub q_h: f64,
    /// Largest prefix ratio on the event; 0 when the event is empty.
    pub max_prefix_ratio: f64,
    pub n_atoms: usize,
}

/// The event of positions strictly after the trigger of each
/// negative-advantage trajectory, where the trigger is the first position
/// with local ratio below `tau_c`.
pub fn post_trigger_event(s: &FiniteScenario, tau_c: f64) -> Result<EventMasses> {
    let nu_b = behavior_occupancy(s)?;
    let nu_pre = current_prefix_occupancy(s)?;
    let mut m = Vec::new();
    let mut q = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for (ba, pa) in nu_b.atoms.iter().zip(&nu_pre.atoms) {
        let traj = &s.prompts[ba.key.prompt].trajectories[ba.key.trajectory];
        if traj.advantage >= 0.0 {
            continue;
        }
        let ratios = traj.local_ratios();
        let Some(kappa) = ratios.iter().position(|r| *r < tau_c) else { continue };
        if ba.key.position > kappa + 1 {
            m.push(ba.mass);
            q.push(pa.mass);
            max_ratio = max_ratio.max(prefix_ratio(&ratios, ba.key.position)?);
        }
    }
    Ok(EventMasses {
        m_h: pairwise_sum(&m),
        q_h: pairwise_sum(&q),
        max_prefix_ratio: max_ratio,
        n_atoms: m.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReverseCheck {
    /// `chi^2(current-prefix || behavior)` by atom summation.
    pub forward: f64,
    /// `E_behavior[(R_{t-1} - 1)^2]` from direct prefix ratios.
    pub expectation: f64,
}

/// Evaluates both sides of `chi^2(pre || beta) = E_beta[(R - 1)^2]` and
/// errors if they disagree beyond [`REVERSE_TOL`].
pub fn reverse_direction_check(s: &FiniteScenario) -> Result<ReverseCheck> {
    let nu_b = behavior_occupancy(s)?;
    let nu_pre = current_prefix_occupancy(s)?;
    let forward = chi_square(&nu_pre, &nu_b)?
        .finite()
        .ok_or_else(|| Error::precondition("current-prefix measure is not dominated by the behavior measure"))?;
    let mut terms = Vec::with_capacity(nu_b.atoms.len());
    for atom in &nu_b.atoms {
        if atom.mass == 0.0 {
            continue;
        }
        let traj = &s.prompts[atom.key.prompt].trajectories[atom.key.trajectory];
        let r = prefix_ratio(&traj.local_ratios(), atom.key.position)?;
        terms.push(atom.mass * (r - 1.0) * (r - 1.0));
    }
    let expectation = pairwise_sum(&terms);
    if (forward - expectation).abs() > REVERSE_TOL * forward.abs().max(1.0) {
        return Err(Error::precondition(format!(
            "reverse-direction identity failed: {forward} vs {expectation}"
        )));
    }
    Ok(ReverseCheck { forward, expectation })
}

/// Everything reported for one `(m, r, lambda2)` construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryRow {
    pub m: f64,
    pub r: f64,
    pub lambda2: f64,
    pub chi_square: ChiSquare,
    pub m_h: f64,
    pub q_h: f64,
    pub binomial_bound: ChiSquare,
    pub simplified_bound: f64,
    pub retained_local_ratio: f64,
    pub reverse_chi_square: f64,
    pub chain_holds: bool,
}

/// Evaluates the construction; the trigger threshold is 1 so the `h` token,
/// whose local ratio is exactly 1, is retained.
pub fn evaluate_corollary(m: f64, r: f64, lambda2: f64) -> Result<CorollaryRow> {
    let s = corollary_scenario(m, r, lambda2)?;
    let chi = chi_square(&behavior_occupancy(&s)?, &current_prefix_occupancy(&s)?)?;
    let event = post_trigger_event(&s, 1.0)?;
    let bounds = theorem_bounds(event.m_h, event.q_h, r)?;
    let reverse = reverse_direction_check(&s)?;
    let retained_local_ratio = s.prompts[0].trajectories[0].local_ratios()[1];
    let chain_holds = chi.at_least(&bounds.binomial) && bounds.binomial.at_least(&ChiSquare::Finite(bounds.simplified));
    Ok(CorollaryRow {
        m,
        r,
        lambda2,
        chi_square: chi,
        m_h: event.m_h,
        q_h: event.q_h,
        binomial_bound: bounds.binomial,
        simplified_bound: bounds.simplified,
        retained_local_ratio,
        reverse_chi_square: reverse.forward,
        chain_holds,
    })
}

/// Cartesian grid of constructions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryGrid {
    pub m: Vec<f64>,
    pub r: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for TheoryGrid {
    fn default() -> Self {
        Self {
            m: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            r: vec![0.001, 0.01, 0.05, 0.1, 0.25],
            lambda2: vec![0.25, 0.5, 0.75],
        }
    }
}

pub fn evaluate_grid(grid: &TheoryGrid) -> Result<Vec<CorollaryRow>> {
    if grid.m.is_empty() || grid.r.is_empty() || grid.lambda2.is_empty() {
        return Err(Error::config("theory", "every grid axis needs at least one value"));
    }
    let mut rows = Vec::with_capacity(grid.m.len() * grid.r.len() * grid.lambda2.len());
    for &m in &grid.m {
        for &r in &grid.r {
            for &l in &grid.lambda2 {
                rows.push(evaluate_corollary(m, r, l)?);
            }
        }
    }
    Ok(rows)
}

/// Sample estimates of the post-trigger event masses on a rollout dataset.
///
/// Prompts are weighted uniformly over the dataset's responses and positions
/// uniformly over the horizon. The current-prefix mass is estimated by
/// importance weighting behavior samples with their prefix ratios.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpiricalBoundInputs {
    pub m_h: f64,
    pub q_h: f64,
    pub max_prefix_ratio: f64,
    pub n_responses: usize,
    pub n_triggered: usize,
    /// Prefix ratios of every post-trigger token, in dataset order.
    pub prefix_ratios: Vec<f64>,
}

pub fn empirical_bound_inputs(
    params: &PolicyParams,
    task: &TaskConfig,
    dataset: &StaleDataset,
    tau_c: f64,
) -> Result<EmpiricalBoundInputs> {
    let n = dataset.n_responses();
    if n == 0 {
        return Err(Error::precondition("empty dataset"));
    }
    let per_atom = 1.0 / (n as f64 * task.seq_len as f64);
    let mut m = Vec::new();
    let mut q = Vec::new();
    let mut prefix_ratios = Vec::new();
    let mut n_triggered = 0;
    for record in dataset.groups.iter().flat_map(|g| &g.responses) {
        let ratios = importance_ratios(params, task, record)?;
        let Some(kappa) = find_trigger(record, &ratios, tau_c)? else { continue };
        n_triggered += 1;
        for t in (kappa + 2)..=record.len() {
            let r = prefix_ratio(&ratios, t)?;
            m.push(per_atom);
            q.push(per_atom * r);
            prefix_ratios.push(r);
        }
    }
    Ok(EmpiricalBoundInputs {
        m_h: pairwise_sum(&m),
        q_h: pairwise_sum(&q),
        max_prefix_ratio: prefix_ratios.iter().copied().fold(0.0, f64::max),
        n_responses: n,
        n_triggered,
        prefix_ratios,
    })
}
