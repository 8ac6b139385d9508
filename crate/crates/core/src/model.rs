//! Queueing model shared by the solvers and the simulator.
//!
//! `n` identical exponential servers fed by one Poisson stream. Arrivals are
//! routed to the shortest queue unless a fault (reliability setting) or an
//! attack (security setting) misroutes them. Servers are indexed from 0 in
//! code; all extremizer ties resolve to the lowest index.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the routing probabilities summing to one.
pub const ROUTING_SUM_TOL: f64 = 1e-12;

/// Scalar parameters of the failure-prone parallel-server system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    /// Number of servers.
    pub n: usize,
    /// Poisson arrival rate.
    pub lambda: f64,
    /// Exponential service rate of each server.
    pub mu: f64,
    /// Continuous-time discount rate.
    pub gamma: f64,
    /// Probability that an unprotected routing instruction is faulty.
    pub fault_prob: f64,
    /// Destination distribution of faulty routings.
    pub routing_probs: Vec<f64>,
    /// Cost rate of protection (defense).
    pub protect_cost: f64,
    /// Cost rate of attacking; only the security game reads it.
    pub attack_cost: f64,
}

impl SystemParams {
    /// Two servers with uniform faulty routing and unit rates.
    pub fn two_server(lambda: f64, mu: f64, gamma: f64) -> Self {
        Self {
            n: 2,
            lambda,
            mu,
            gamma,
            fault_prob: 0.0,
            routing_probs: vec![0.5, 0.5],
            protect_cost: 1.0,
            attack_cost: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        // lambda = 0 is admitted so that arrival-free runs can be expressed.
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.fault_prob) {
            return bad(format!("fault_prob must lie in [0,1], got {}", self.fault_prob));
        }
        if self.routing_probs.len() != self.n {
            return bad(format!("routing_probs has {} entries, expected {}", self.routing_probs.len(), self.n));
        }
        if let Some(p) = self.routing_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("routing probability {p} outside [0,1]"));
        }
        let sum: f64 = self.routing_probs.iter().sum();
        if (sum - 1.0).abs() > ROUTING_SUM_TOL {
            return bad(format!("routing_probs sum to {sum}, expected 1"));
        }
        if !(self.protect_cost > 0.0 && self.protect_cost.is_finite()) {
            return bad(format!("protect_cost must be positive, got {}", self.protect_cost));
        }
        if !(self.attack_cost > 0.0 && self.attack_cost.is_finite()) {
            return bad(format!("attack_cost must be positive, got {}", self.attack_cost));
        }
        Ok(())
    }

    /// Demand over total capacity, `lambda / (n mu)`.
    pub fn utilization(&self) -> f64 {
        self.lambda / (self.n as f64 * self.mu)
    }

    pub fn p_max(&self) -> f64 {
        self.routing_probs.iter().copied().fold(0.0, f64::max)
    }

    /// Rescale lambda so that `lambda / (n mu)` equals `rho`.
    pub fn with_utilization(mut self, rho: f64) -> Self {
        self.lambda = rho * self.n as f64 * self.mu;
        self
    }
}

/// Queue lengths `(x_1, ..., x_n)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueueState(Vec<usize>);

impl QueueState {
    pub fn new(lengths: Vec<usize>) -> Self {
        Self(lengths)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn lengths(&self) -> &[usize] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm1(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn min_len(&self) -> usize {
        self.0.iter().copied().min().unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.0.iter().copied().max().unwrap_or(0)
    }

    /// Lowest index attaining the minimum length.
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v < self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Lowest index attaining the maximum length.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_diagonal(&self) -> bool {
        self.0.windows(2).all(|w| w[0] == w[1])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0)
    }

    /// `x + e_i`, with coordinate `i` clamped to the grid bound.
    pub fn successor_up(&self, i: usize, grid: &Grid) -> Result<QueueState> {
        self.check_index(i)?;
        Ok(self.up_clamped(i, grid.bound))
    }

    /// `(x - e_i)^+`.
    pub fn successor_down(&self, i: usize) -> Result<QueueState> {
        self.check_index(i)?;
        Ok(self.down(i))
    }

    /// `x + e_i` without any truncation.
    pub fn up(&self, i: usize) -> QueueState {
        let mut v = self.0.clone();
        v[i] += 1;
        Self(v)
    }

    pub(crate) fn up_clamped(&self, i: usize, bound: usize) -> QueueState {
        let mut v = self.0.clone();
        v[i] = (v[i] + 1).min(bound);
        Self(v)
    }

    pub(crate) fn down(&self, i: usize) -> QueueState {
        let mut v = self.0.clone();
        v[i] = v[i].saturating_sub(1);
        Self(v)
    }

    /// Coordinate-wise projection onto `{0..bound}^n`.
    pub fn clamped(&self, bound: usize) -> QueueState {
        Self(self.0.iter().map(|&v| v.min(bound)).collect())
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.0.len() {
            return Err(Error::IndexOutOfRange { index: i, n: self.0.len() });
        }
        Ok(())
    }
}

impl fmt::Display for QueueState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<usize>> for QueueState {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

/// The truncated state space `{0..bound}^n`.
///
/// States are enumerated lexicographically with `x_1` varying slowest.
/// `margin` is the width of the band below `bound` that audits skip: a state
/// is *interior* when every coordinate is at most `bound - margin - 1`, so its
/// upward successors are never clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub bound: usize,
    pub margin: usize,
}

impl Grid {
    pub fn new(n: usize, bound: usize, margin: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParams("grid needs n >= 1".into()));
        }
        if bound == 0 {
            return Err(Error::InvalidParams("grid bound must be at least 1".into()));
        }
        if margin >= bound {
            return Err(Error::InvalidParams(format!("boundary margin {margin} must be below the bound {bound}")));
        }
        if (bound + 1).checked_pow(n as u32).is_none() {
            return Err(Error::InvalidParams("grid too large".into()));
        }
        Ok(Self { n, bound, margin })
    }

    /// Grid with margin `max(2, bound / 5)`, capped at `bound - 1`.
    pub fn with_default_margin(n: usize, bound: usize) -> Result<Self> {
        Self::new(n, bound, Self::default_margin(bound))
    }

    pub fn default_margin(bound: usize) -> usize {
        (bound / 5).max(2).min(bound.saturating_sub(1))
    }

    pub fn len(&self) -> usize {
        (self.bound + 1).pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: &QueueState) -> bool {
        x.dim() == self.n && x.lengths().iter().all(|&v| v <= self.bound)
    }

    pub fn index_of(&self, x: &QueueState) -> Result<usize> {
        if !self.contains(x) {
            return Err(Error::OutsideGrid(x.clone()));
        }
        Ok(self.index_unchecked(x.lengths()))
    }

    pub(crate) fn index_unchecked(&self, x: &[usize]) -> usize {
        x.iter().fold(0, |acc, &v| acc * (self.bound + 1) + v)
    }

    pub fn state_at(&self, mut idx: usize) -> QueueState {
        let base = self.bound + 1;
        let mut v = vec![0; self.n];
        for slot in v.iter_mut().rev() {
            *slot = idx % base;
            idx /= base;
        }
        QueueState(v)
    }

    pub fn states(&self) -> impl Iterator<Item = QueueState> + '_ {
        (0..self.len()).map(move |i| self.state_at(i))
    }

    /// True when no coordinate lies in the boundary band.
    pub fn is_interior(&self, x: &QueueState) -> bool {
        x.lengths().iter().all(|&v| v + self.margin < self.bound)
    }

    pub fn interior_states(&self) -> impl Iterator<Item = QueueState> + '_ {
        self.states().filter(move |x| self.is_interior(x))
    }
}

/// `lambda~ = lambda / scale`, `mu~ = mu / scale` with `scale = gamma + lambda + n mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformizedParams {
    pub lambda_tilde: f64,
    pub mu_tilde: f64,
    pub scale: f64,
    /// `lambda~ + n mu~`, the sup-norm contraction factor of the Bellman operators.
    pub contraction: f64,
}

pub fn uniformize(params: &SystemParams) -> UniformizedParams {
    let n = params.n as f64;
    let scale = params.gamma + params.lambda + n * params.mu;
    let lambda_tilde = params.lambda / scale;
    let mu_tilde = params.mu / scale;
    UniformizedParams { lambda_tilde, mu_tilde, scale, contraction: lambda_tilde + n * mu_tilde }
}

/// Dense per-state table of scaled values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ValueTable {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&QueueState) -> f64) -> Self {
        Self { grid, values: grid.states().map(|x| f(&x)).collect() }
    }

    pub fn get(&self, x: &QueueState) -> Result<f64> {
        Ok(self.values[self.grid.index_of(x)?])
    }

    pub fn sup_distance(&self, other: &ValueTable) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

macro_rules! probability_map {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name {
            pub grid: Grid,
            pub probs: Vec<f64>,
        }

        impl $name {
            pub fn new(grid: Grid, probs: Vec<f64>) -> Result<Self> {
                if probs.len() != grid.len() {
                    return Err(Error::InvalidParams(format!(
                        "expected {} probabilities, got {}",
                        grid.len(),
                        probs.len()
                    )));
                }
                if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                    return Err(Error::InvalidParams(format!("probability {p} outside [0,1]")));
                }
                Ok(Self { grid, probs })
            }

            pub fn constant(grid: Grid, p: f64) -> Self {
                Self { grid, probs: vec![p.clamp(0.0, 1.0); grid.len()] }
            }

            pub fn get(&self, x: &QueueState) -> Result<f64> {
                Ok(self.probs[self.grid.index_of(x)?])
            }

            /// Probability at `x`, reading states beyond the grid at their
            /// coordinate-wise clamped projection.
            pub fn extended(&self, x: &[usize]) -> f64 {
                let idx = x
                    .iter()
                    .fold(0, |acc, &v| acc * (self.grid.bound + 1) + v.min(self.grid.bound));
                self.probs[idx]
            }

            pub fn is_deterministic(&self) -> bool {
                self.probs.iter().all(|&p| p == 0.0 || p == 1.0)
            }
        }
    };
}

probability_map!(
    /// Protection probability `b(x)` per grid state.
    ProtectPolicy
);
probability_map!(
    /// Attack probability `a(x)` per grid state.
    AttackStrategy
);

/// Precomputed successor indices for every grid state.
#[derive(Debug, Clone)]
pub(crate) struct Neighbors {
    pub n: usize,
    pub norm1: Vec<f64>,
    /// `idx * n + i` -> index of `x + e_i` (clamped).
    pub up: Vec<usize>,
    /// `idx * n + i` -> index of `(x - e_i)^+`.
    pub down: Vec<usize>,
    pub up_min: Vec<usize>,
    pub up_max: Vec<usize>,
}

impl Neighbors {
    pub fn new(grid: &Grid) -> Self {
        let n = grid.n;
        let len = grid.len();
        let mut nb = Neighbors {
            n,
            norm1: Vec::with_capacity(len),
            up: Vec::with_capacity(len * n),
            down: Vec::with_capacity(len * n),
            up_min: Vec::with_capacity(len),
            up_max: Vec::with_capacity(len),
        };
        for x in grid.states() {
            nb.norm1.push(x.norm1() as f64);
            for i in 0..n {
                nb.up.push(grid.index_unchecked(x.up_clamped(i, grid.bound).lengths()));
                nb.down.push(grid.index_unchecked(x.down(i).lengths()));
            }
            nb.up_min.push(grid.index_unchecked(x.up_clamped(x.argmin(), grid.bound).lengths()));
            nb.up_max.push(grid.index_unchecked(x.up_clamped(x.argmax(), grid.bound).lengths()));
        }
        nb
    }

    #[inline]
    pub fn ups(&self, idx: usize) -> &[usize] {
        &self.up[idx * self.n..(idx + 1) * self.n]
    }

    #[inline]
    pub fn downs(&self, idx: usize) -> &[usize] {
        &self.down[idx * self.n..(idx + 1) * self.n]
    }
}
