//! Zero-sum attacker-defender stochastic game.
//!
//! At every state the minimax Bellman equation reduces to a 2x2 matrix game
//! whose rows are the attacker's actions (no attack, attack) and whose columns
//! are the defender's actions (no protection, protection):
//!
//! ```text
//! K(x) [1 1; 1 1] + [0, c_b; delta(x) - c_a, c_b - c_a]
//! ```
//!
//! with `K(x) = ||x||_1 + mu~ sum_i V((x-e_i)^+) + lambda~ V(x+e_min)` and
//! `delta(x) = lambda~ (V(x+e_max) - V(x+e_min))`. The attacker maximizes.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    uniformize, AttackStrategy, Grid, Neighbors, ProtectPolicy, QueueState, SystemParams, UniformizedParams, ValueTable,
};
use crate::reliability::{SolverConfig, UpdateScheme};

/// Absolute tolerance when checking the structural shape of a game.
const SHAPE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskLabel {
    /// No attack, no protection.
    S1,
    /// Attack, no protection.
    S2,
    /// Both players mix.
    S3,
}

impl fmt::Display for RiskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RiskLabel::S1 => "S1",
            RiskLabel::S2 => "S2",
            RiskLabel::S3 => "S3",
        })
    }
}

/// Classify a state by its attack incentive `delta`.
pub fn classify(delta: f64, attack_cost: f64, protect_cost: f64) -> RiskLabel {
    if delta <= attack_cost {
        RiskLabel::S1
    } else if delta <= protect_cost {
        RiskLabel::S2
    } else {
        RiskLabel::S3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatrixGame2x2 {
    /// Payoffs to the attacker; `entries[row][col]`.
    pub entries: [[f64; 2]; 2],
    pub offset: f64,
}

impl MatrixGame2x2 {
    pub fn from_costs(offset: f64, attack_cost: f64, protect_cost: f64, delta: f64) -> Self {
        Self {
            entries: [
                [offset, offset + protect_cost],
                [offset - attack_cost + delta, offset - attack_cost + protect_cost],
            ],
            offset,
        }
    }

    /// Recover `(c_a, c_b, delta)` from the entries.
    pub fn costs(&self) -> Result<(f64, f64, f64)> {
        let [[e00, e01], [e10, e11]] = self.entries;
        if !self.entries.iter().flatten().all(|v| v.is_finite()) || !self.offset.is_finite() {
            return Err(Error::MalformedGame("non-finite entry".into()));
        }
        if (e00 - self.offset).abs() > SHAPE_TOL * (1.0 + self.offset.abs()) {
            return Err(Error::MalformedGame(format!("entry (NA,NP) = {e00} differs from the offset {}", self.offset)));
        }
        let protect_cost = e01 - self.offset;
        let attack_cost = protect_cost - (e11 - self.offset);
        let delta = e10 - self.offset + attack_cost;
        if !(protect_cost > 0.0 && attack_cost > 0.0) {
            return Err(Error::MalformedGame(format!(
                "costs must be positive, got c_a = {attack_cost}, c_b = {protect_cost}"
            )));
        }
        Ok((attack_cost, protect_cost, delta))
    }

    /// Expected payoff when the attacker attacks with probability `a` and the
    /// defender protects with probability `b`.
    pub fn payoff(&self, a: f64, b: f64) -> f64 {
        let [[e00, e01], [e10, e11]] = self.entries;
        (1.0 - a) * ((1.0 - b) * e00 + b * e01) + a * ((1.0 - b) * e10 + b * e11)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub attack_prob: f64,
    pub protect_prob: f64,
    pub value: f64,
    pub label: RiskLabel,
}

/// Exact equilibrium of the structured 2x2 game by the three closed-form
/// cases: no saddle point only when `delta > max(c_a, c_b)`.
pub fn solve_2x2(game: &MatrixGame2x2) -> Result<EquilibriumPoint> {
    let (ca, cb, delta) = game.costs()?;
    Ok(equilibrium(game.offset, ca, cb, delta))
}

pub(crate) fn equilibrium(offset: f64, ca: f64, cb: f64, delta: f64) -> EquilibriumPoint {
    let label = classify(delta, ca, cb);
    let (attack_prob, protect_prob, gain) = match label {
        RiskLabel::S1 => (0.0, 0.0, 0.0),
        RiskLabel::S2 => (1.0, 0.0, delta - ca),
        RiskLabel::S3 => (cb / delta, 1.0 - ca / delta, cb - ca * cb / delta),
    };
    EquilibriumPoint { attack_prob, protect_prob, value: offset + gain, label }
}

/// `max{0, min{delta - c_a, c_b - c_a c_b / delta}}`, the attacker's surplus
/// over the offset.
pub fn surplus(delta: f64, ca: f64, cb: f64) -> f64 {
    if delta <= 0.0 {
        return 0.0;
    }
    (delta - ca).min(cb - ca * cb / delta).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameSolution {
    pub value: ValueTable,
    pub attack: AttackStrategy,
    pub protect: ProtectPolicy,
    pub labels: Vec<RiskLabel>,
    pub deltas: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

struct Game<'a> {
    params: &'a SystemParams,
    uni: UniformizedParams,
    nb: Neighbors,
}

impl Game<'_> {
    #[inline]
    fn offset_and_delta(&self, v: &[f64], idx: usize) -> (f64, f64) {
        let serve: f64 = self.nb.downs(idx).iter().map(|&d| v[d]).sum();
        let at_min = v[self.nb.up_min[idx]];
        let offset = self.nb.norm1[idx] + self.uni.mu_tilde * serve + self.uni.lambda_tilde * at_min;
        let delta = self.uni.lambda_tilde * (v[self.nb.up_max[idx]] - at_min);
        (offset, delta)
    }

    #[inline]
    fn value(&self, v: &[f64], idx: usize) -> f64 {
        let (offset, delta) = self.offset_and_delta(v, idx);
        offset + surplus(delta, self.params.attack_cost, self.params.protect_cost)
    }

    fn point(&self, v: &[f64], idx: usize) -> EquilibriumPoint {
        let (offset, delta) = self.offset_and_delta(v, idx);
        equilibrium(offset, self.params.attack_cost, self.params.protect_cost, delta)
    }

    fn sweep(&self, v: &mut Vec<f64>, scheme: UpdateScheme) -> f64 {
        match scheme {
            UpdateScheme::InPlace => {
                let mut change: f64 = 0.0;
                for idx in 0..v.len() {
                    let nv = self.value(v, idx);
                    change = change.max((nv - v[idx]).abs());
                    v[idx] = nv;
                }
                change
            }
            UpdateScheme::Synchronous => {
                let next: Vec<f64> = (0..v.len()).into_par_iter().map(|idx| self.value(v, idx)).collect();
                let change = next.iter().zip(v.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                *v = next;
                change
            }
        }
    }
}

/// Build the auxiliary matrix game at `x` from a value table.
pub fn matrix_game(
    v: &ValueTable,
    x: &QueueState,
    params: &SystemParams,
    uni: &UniformizedParams,
) -> Result<MatrixGame2x2> {
    let grid = v.grid;
    grid.index_of(x)?;
    let at = |y: QueueState| v.values[grid.index_unchecked(y.lengths())];
    let serve: f64 = (0..x.dim()).map(|i| at(x.down(i))).sum();
    let at_min = at(x.up_clamped(x.argmin(), grid.bound));
    let offset = x.norm1() as f64 + uni.mu_tilde * serve + uni.lambda_tilde * at_min;
    let delta = uni.lambda_tilde * (at(x.up_clamped(x.argmax(), grid.bound)) - at_min);
    Ok(MatrixGame2x2::from_costs(offset, params.attack_cost, params.protect_cost, delta))
}

/// `lambda~ (V(x+e_max) - V(x+e_min))` at a state whose successors are not clamped.
pub fn delta_sec(v: &ValueTable, x: &QueueState, uni: &UniformizedParams) -> Result<f64> {
    let grid = &v.grid;
    grid.index_of(x)?;
    if x.max_len() >= grid.bound {
        return Err(Error::BoundaryState(x.clone()));
    }
    let at = |y: QueueState| v.values[grid.index_unchecked(y.lengths())];
    Ok(uni.lambda_tilde * (at(x.up(x.argmax())) - at(x.up(x.argmin()))))
}

/// Shapley value iteration from `V = 0`, followed by one pass that reads the
/// equilibrium strategies off the converged table.
pub fn shapley_iteration(params: &SystemParams, grid: &Grid, config: &SolverConfig) -> Result<GameSolution> {
    params.validate()?;
    config.validate()?;
    if grid.n != params.n {
        return Err(Error::InvalidParams(format!("grid has n = {}, params have n = {}", grid.n, params.n)));
    }
    let game = Game { params, uni: uniformize(params), nb: Neighbors::new(grid) };
    let mut v = vec![0.0; grid.len()];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while history.len() < config.max_iterations {
        residual = game.sweep(&mut v, config.update_scheme);
        history.push(residual);
        if residual < config.epsilon {
            converged = true;
            break;
        }
    }
    let points: Vec<EquilibriumPoint> = (0..v.len()).map(|idx| game.point(&v, idx)).collect();
    let deltas = (0..v.len()).map(|idx| game.offset_and_delta(&v, idx).1).collect();
    Ok(GameSolution {
        attack: AttackStrategy { grid: *grid, probs: points.iter().map(|p| p.attack_prob).collect() },
        protect: ProtectPolicy { grid: *grid, probs: points.iter().map(|p| p.protect_prob).collect() },
        labels: points.iter().map(|p| p.label).collect(),
        deltas,
        value: ValueTable { grid: *grid, values: v },
        iterations: history.len(),
        residual,
        converged,
        residual_history: history,
    })
}

/// Largest `|V(x) - val(M(x, V))|` over the grid.
pub fn fixed_point_residual(v: &ValueTable, params: &SystemParams) -> f64 {
    let game = Game { params, uni: uniformize(params), nb: Neighbors::new(&v.grid) };
    (0..v.values.len()).map(|idx| (game.value(&v.values, idx) - v.values[idx]).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EquilibriumViolation {
    /// A player gains more than the tolerance by a pure deviation.
    Deviation { state: QueueState, attacker_gain: f64, defender_gain: f64 },
    /// `delta` drops along an increasing-risk direction.
    DeltaMonotonicity { state: QueueState, neighbor: QueueState, magnitude: f64 },
    /// `delta` is negative at an interior state.
    NegativeDelta { state: QueueState, delta: f64 },
}

/// Audit a strategy pair against a value table: one-step best responses at
/// every state, plus monotonicity of `delta` along `x + e_l` and `x - e_m`
/// on the interior.
pub fn equilibrium_audit(
    v: &ValueTable,
    attack: &AttackStrategy,
    protect: &ProtectPolicy,
    params: &SystemParams,
    uni: &UniformizedParams,
    tol_deviation: f64,
    tol_monotone: f64,
) -> Result<Vec<EquilibriumViolation>> {
    let grid = v.grid;
    let mut out = Vec::new();
    for (idx, x) in grid.states().enumerate() {
        let game = matrix_game(v, &x, params, uni)?;
        let (a, b) = (attack.probs[idx], protect.probs[idx]);
        let u = game.payoff(a, b);
        let attacker_gain = game.payoff(0.0, b).max(game.payoff(1.0, b)) - u;
        let defender_gain = u - game.payoff(a, 0.0).min(game.payoff(a, 1.0));
        if attacker_gain > tol_deviation || defender_gain > tol_deviation {
            out.push(EquilibriumViolation::Deviation { state: x, attacker_gain, defender_gain });
        }
    }
    for x in grid.interior_states() {
        let dx = delta_sec(v, &x, uni)?;
        if dx < -tol_monotone {
            out.push(EquilibriumViolation::NegativeDelta { state: x.clone(), delta: dx });
        }
        let mut neighbors = vec![x.up(x.argmax())];
        if x.lengths()[x.argmin()] > 0 {
            neighbors.push(x.down(x.argmin()));
        }
        for y in neighbors.into_iter().filter(|y| grid.is_interior(y)) {
            let dy = delta_sec(v, &y, uni)?;
            if dy < dx - tol_monotone {
                out.push(EquilibriumViolation::DeltaMonotonicity { state: x.clone(), neighbor: y, magnitude: dx - dy });
            }
        }
    }
    Ok(out)
}

/// Interior state pairs `(x, y)` with `y = x + e_l` or `y = x - e_m` whose
/// risk label decreases.
pub fn label_monotonicity_violations(grid: &Grid, labels: &[RiskLabel]) -> Vec<(QueueState, QueueState)> {
    let mut out = Vec::new();
    for x in grid.interior_states() {
        let lx = labels[grid.index_unchecked(x.lengths())];
        let mut neighbors = vec![x.up(x.argmax())];
        if x.lengths()[x.argmin()] > 0 {
            neighbors.push(x.down(x.argmin()));
        }
        for y in neighbors.into_iter().filter(|y| grid.is_interior(y)) {
            if labels[grid.index_unchecked(y.lengths())] < lx {
                out.push((x.clone(), y));
            }
        }
    }
    out
}

/// Which risk classes occur on the interior of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Regime {
    pub s1: bool,
    pub s2: bool,
    pub s3: bool,
}

impl Regime {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a RiskLabel>) -> Self {
        let mut r = Regime::default();
        for l in labels {
            match l {
                RiskLabel::S1 => r.s1 = true,
                RiskLabel::S2 => r.s2 = true,
                RiskLabel::S3 => r.s3 = true,
            }
        }
        r
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> =
            [(self.s1, "S1"), (self.s2, "S2"), (self.s3, "S3")].iter().filter(|(on, _)| *on).map(|(_, s)| *s).collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeCell {
    pub attack_cost: f64,
    pub protect_cost: f64,
    /// `None` when the solver did not converge.
    pub regime: Option<Regime>,
}

/// Solve the game on every `(c_a, c_b)` lattice point and record which risk
/// classes appear on the interior.
pub fn regime_sweep(
    template: &SystemParams,
    grid: &Grid,
    config: &SolverConfig,
    ca_values: &[f64],
    cb_values: &[f64],
) -> Result<Vec<RegimeCell>> {
    if ca_values.is_empty() || cb_values.is_empty() {
        return Err(Error::InvalidParams("regime sweep needs non-empty cost lists".into()));
    }
    if let Some(c) = ca_values.iter().chain(cb_values).find(|c| c.is_nan() || **c <= 0.0) {
        return Err(Error::InvalidParams(format!("costs must be positive, got {c}")));
    }
    let pairs: Vec<(f64, f64)> = ca_values.iter().flat_map(|&ca| cb_values.iter().map(move |&cb| (ca, cb))).collect();
    let cells = pairs
        .par_iter()
        .map(|&(ca, cb)| {
            let params = SystemParams { attack_cost: ca, protect_cost: cb, ..template.clone() };
            let regime = shapley_iteration(&params, grid, config).ok().filter(|s| s.converged).map(|s| {
                Regime::from_labels(
                    grid.states().enumerate().filter(|(_, x)| grid.is_interior(x)).map(|(idx, _)| &s.labels[idx]),
                )
            });
            RegimeCell { attack_cost: ca, protect_cost: cb, regime }
        })
        .collect();
    Ok(cells)
}
