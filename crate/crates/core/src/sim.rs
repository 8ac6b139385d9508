//! Event-driven simulation of the controlled queueing process.
//!
//! Replication `r` of a run seeded with `s` draws from `ChaCha8Rng` seeded
//! with `s` on stream `r`, so every replication is reproducible on its own and
//! the aggregate does not depend on thread scheduling. Each event consumes a
//! fixed number of uniforms regardless of the strategies in play, which keeps
//! common random numbers aligned across compared policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{AttackStrategy, Grid, ProtectPolicy, QueueState, SystemParams};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    LowestIndex,
    #[default]
    UniformRandom,
    /// Among tied queues, pick queue `i` with probability proportional to `w[i]`.
    Weighted(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Protection and attack costs accrue at a rate while the action is held.
    #[default]
    Rate,
    /// Protection and attack costs are charged once per arrival decision.
    LumpSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extension {
    /// Off-grid states read the strategy at their clamped projection.
    #[default]
    Clamp,
    /// Reaching an off-grid state is an error.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub horizon: f64,
    pub replications: usize,
    pub seed: u64,
    pub tie_break: TieBreak,
    pub cost_mode: CostMode,
    pub extension: Extension,
    /// Fraction of the horizon discarded before time averages.
    pub burn_in: f64,
    /// Per-queue capacity; arrivals to a full queue are lost.
    pub capacity: Option<usize>,
    pub initial_state: Option<QueueState>,
    pub record_events: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            horizon: 50_000.0,
            replications: 20,
            seed: 0,
            tie_break: TieBreak::default(),
            cost_mode: CostMode::default(),
            extension: Extension::default(),
            burn_in: 0.1,
            capacity: None,
            initial_state: None,
            record_events: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, params: &SystemParams) -> Result<()> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::InvalidParams(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.replications == 0 {
            return Err(Error::InvalidParams("replications must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::InvalidParams(format!("burn-in fraction must lie in [0, 1), got {}", self.burn_in)));
        }
        if let TieBreak::Weighted(w) = &self.tie_break {
            if w.len() != params.n || w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidParams("tie-break weights must be n positive numbers".into()));
            }
        }
        if let Some(x) = &self.initial_state {
            if x.dim() != params.n {
                return Err(Error::OutsideGrid(x.clone()));
            }
            if let Some(cap) = self.capacity {
                if x.max_len() > cap {
                    return Err(Error::OutsideGrid(x.clone()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "queue", rename_all = "kebab-case")]
pub enum EventKind {
    ArrivalRoutedMin(usize),
    ArrivalFaulty(usize),
    ArrivalAttackedMax(usize),
    Service(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    /// The arrival met a full queue and was lost.
    pub blocked: bool,
    pub state: QueueState,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EventCounts {
    pub routed_min: u64,
    /// Faulty arrivals per destination queue.
    pub faulty: Vec<u64>,
    pub attacked: u64,
    pub services: u64,
    pub blocked: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Empty unless `record_events` is set.
    pub events: Vec<Event>,
    pub final_state: QueueState,
    pub counts: EventCounts,
    pub discounted_cost: f64,
    /// Time average of `||X(t)||_1` after the burn-in.
    pub mean_queue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    /// 95% Student-t half-width; infinite with a single replication.
    pub half_width: f64,
    pub per_replication: Vec<f64>,
}

impl CostEstimate {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let r = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / r;
        let half_width = if samples.len() < 2 {
            f64::INFINITY
        } else {
            let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1.0);
            let t = StudentsT::new(0.0, 1.0, r - 1.0).expect("positive degrees of freedom").inverse_cdf(0.975);
            t * (var / r).sqrt()
        };
        Self { mean, half_width, per_replication: samples }
    }
}

/// `int_{t1}^{t2} k e^{-gamma t} dt`.
pub fn discounted_integral(k: f64, gamma: f64, t1: f64, t2: f64) -> f64 {
    k * ((-gamma * t1).exp() - (-gamma * t2).exp()) / gamma
}

fn pick_tied(candidates: &[usize], tie: &TieBreak, u: f64) -> usize {
    match tie {
        TieBreak::LowestIndex => candidates[0],
        TieBreak::UniformRandom => candidates[((u * candidates.len() as f64) as usize).min(candidates.len() - 1)],
        TieBreak::Weighted(w) => {
            let total: f64 = candidates.iter().map(|&i| w[i]).sum();
            let mut acc = 0.0;
            for &i in candidates {
                acc += w[i] / total;
                if u < acc {
                    return i;
                }
            }
            *candidates.last().unwrap()
        }
    }
}

fn extremizers(x: &[usize], target: usize) -> Vec<usize> {
    (0..x.len()).filter(|&i| x[i] == target).collect()
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn lookup(grid: &Grid, probs_extended: impl Fn(&[usize]) -> f64, x: &[usize], ext: Extension) -> Result<f64> {
    if ext == Extension::Strict && x.iter().any(|&v| v > grid.bound) {
        return Err(Error::UndefinedStrategy(QueueState::new(x.to_vec())));
    }
    Ok(probs_extended(x))
}

/// Simulate one replication over `[0, horizon]`.
pub fn run_trajectory(
    params: &SystemParams,
    policy: &ProtectPolicy,
    attack: Option<&AttackStrategy>,
    config: &SimConfig,
    replication: u64,
) -> Result<Trajectory> {
    params.validate()?;
    config.validate(params)?;
    if policy.grid.n != params.n || attack.is_some_and(|a| a.grid.n != params.n) {
        return Err(Error::InvalidParams("strategy dimension does not match n".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(replication);

    let n = params.n;
    let gamma = params.gamma;
    let burn = config.burn_in * config.horizon;
    let mut x: Vec<usize> = config.initial_state.as_ref().map_or_else(|| vec![0; n], |s| s.lengths().to_vec());
    let mut counts = EventCounts { faulty: vec![0; n], ..EventCounts::default() };
    let mut events = Vec::new();
    let mut t = 0.0;
    let mut cost = 0.0;
    let mut area = 0.0;

    while t < config.horizon {
        // actions held until the next event
        let (u_b, u_a): (f64, f64) = (rng.random(), rng.random());
        let protect = u_b < lookup(&policy.grid, |s| policy.extended(s), &x, config.extension)?;
        let attacked = match attack {
            Some(s) => u_a < lookup(&s.grid, |y| s.extended(y), &x, config.extension)?,
            None => false,
        };

        let busy = x.iter().filter(|&&v| v > 0).count();
        let total = params.lambda + params.mu * busy as f64;
        let u_hold: f64 = rng.random();
        let u_event: f64 = rng.random();
        let norm = x.iter().sum::<usize>() as f64;
        let hold = if total > 0.0 { -(1.0 - u_hold).ln() / total } else { f64::INFINITY };
        let t_next = (t + hold).min(config.horizon);

        let mut rate = norm;
        if config.cost_mode == CostMode::Rate {
            rate += if protect { params.protect_cost } else { 0.0 } - if attacked { params.attack_cost } else { 0.0 };
        }
        cost += discounted_integral(rate, gamma, t, t_next);
        if t_next > burn {
            area += norm * (t_next - t.max(burn));
        }
        if t + hold >= config.horizon {
            break;
        }
        t = t_next;

        let kind = if u_event * total < params.lambda {
            let (u_fault, u_dest, u_tie): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            if config.cost_mode == CostMode::LumpSum {
                let impulse =
                    if protect { params.protect_cost } else { 0.0 } - if attacked { params.attack_cost } else { 0.0 };
                cost += (-gamma * t).exp() * impulse;
            }
            if attack.is_some() {
                if attacked && !protect {
                    EventKind::ArrivalAttackedMax(pick_tied(
                        &extremizers(&x, *x.iter().max().unwrap()),
                        &config.tie_break,
                        u_tie,
                    ))
                } else {
                    EventKind::ArrivalRoutedMin(pick_tied(
                        &extremizers(&x, *x.iter().min().unwrap()),
                        &config.tie_break,
                        u_tie,
                    ))
                }
            } else if !protect && u_fault < params.fault_prob {
                EventKind::ArrivalFaulty(sample_index(&params.routing_probs, u_dest))
            } else {
                EventKind::ArrivalRoutedMin(pick_tied(
                    &extremizers(&x, *x.iter().min().unwrap()),
                    &config.tie_break,
                    u_tie,
                ))
            }
        } else {
            let k = (((u_event * total - params.lambda) / params.mu) as usize).min(busy - 1);
            let i = (0..n).filter(|&i| x[i] > 0).nth(k).unwrap();
            EventKind::Service(i)
        };

        let mut blocked = false;
        match kind {
            EventKind::Service(i) => {
                x[i] -= 1;
                counts.services += 1;
            }
            EventKind::ArrivalRoutedMin(i) | EventKind::ArrivalFaulty(i) | EventKind::ArrivalAttackedMax(i) => {
                match kind {
                    EventKind::ArrivalRoutedMin(_) => counts.routed_min += 1,
                    EventKind::ArrivalFaulty(_) => counts.faulty[i] += 1,
                    _ => counts.attacked += 1,
                }
                if config.capacity.is_some_and(|cap| x[i] >= cap) {
                    blocked = true;
                    counts.blocked += 1;
                } else {
                    x[i] += 1;
                }
            }
        }
        if config.record_events {
            events.push(Event { time: t, kind, blocked, state: QueueState::new(x.clone()) });
        }
    }

    Ok(Trajectory {
        events,
        final_state: QueueState::new(x),
        counts,
        discounted_cost: cost,
        mean_queue: area / (config.horizon - burn),
    })
}

fn replicate(
    params: &SystemParams,
    policy: &ProtectPolicy,
    attack: Option<&AttackStrategy>,
    config: &SimConfig,
    f: impl Fn(&Trajectory) -> f64 + Sync,
) -> Result<CostEstimate> {
    config.validate(params)?;
    let quiet = SimConfig { record_events: false, ..config.clone() };
    let samples = (0..config.replications as u64)
        .into_par_iter()
        .map(|r| run_trajectory(params, policy, attack, &quiet, r).map(|t| f(&t)))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CostEstimate::from_samples(samples))
}

/// Mean discounted cost over independent replications.
pub fn estimate_discounted_cost(
    params: &SystemParams,
    policy: &ProtectPolicy,
    attack: Option<&AttackStrategy>,
    config: &SimConfig,
) -> Result<CostEstimate> {
    replicate(params, policy, attack, config, |t| t.discounted_cost)
}

/// Long-run average number of jobs, one time average per replication.
pub fn estimate_mean_queue(
    params: &SystemParams,
    policy: &ProtectPolicy,
    attack: Option<&AttackStrategy>,
    config: &SimConfig,
) -> Result<CostEstimate> {
    replicate(params, policy, attack, config, |t| t.mean_queue)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedPolicy {
    pub name: String,
    pub protect: ProtectPolicy,
    pub attack: Option<AttackStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean: f64,
    pub half_width: f64,
    /// Min-max score in `[0, 1]` across the compared set.
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// All means coincide, so every normalized score is 0.
    pub degenerate: bool,
    pub estimates: Vec<CostEstimate>,
}

/// Estimate every policy with the same seeds and normalize the means.
pub fn compare_policies(params: &SystemParams, policies: &[NamedPolicy], config: &SimConfig) -> Result<Comparison> {
    if policies.len() < 2 {
        return Err(Error::InvalidParams("compare at least two policies".into()));
    }
    let estimates = policies
        .iter()
        .map(|p| estimate_discounted_cost(params, &p.protect, p.attack.as_ref(), config))
        .collect::<Result<Vec<_>>>()?;
    let lo = estimates.iter().map(|e| e.mean).fold(f64::INFINITY, f64::min);
    let hi = estimates.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max);
    let degenerate = hi - lo <= 0.0;
    let rows = policies
        .iter()
        .zip(&estimates)
        .map(|(p, e)| ComparisonRow {
            name: p.name.clone(),
            mean: e.mean,
            half_width: e.half_width,
            normalized: if degenerate { 0.0 } else { (e.mean - lo) / (hi - lo) },
        })
        .collect();
    Ok(Comparison { rows, degenerate, estimates })
}
