//! Discounted protection MDP under reliability faults.
//!
//! All solvers work on the uniformized Bellman equation
//!
//! ```text
//! J(x) = min_b { ||x||_1 + c_b b + mu~ sum_i J((x-e_i)^+) + lambda~ J(x+e_min)
//!               + (1-b) a lambda~ (sum_i p_i J(x+e_i) - J(x+e_min)) }
//! ```
//!
//! on the truncated grid, with upward successors clamped at the bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    uniformize, Grid, Neighbors, ProtectPolicy, QueueState, SystemParams, UniformizedParams, ValueTable,
};
use crate::stability::floor_unchecked;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateScheme {
    /// Gauss-Seidel sweeps in grid order.
    #[default]
    InPlace,
    /// Jacobi sweeps reading only the previous table.
    Synchronous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(alias = "vi")]
    ValueIteration,
    #[default]
    #[serde(alias = "tpi")]
    TruncatedPolicyIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    pub update_scheme: UpdateScheme,
    pub stability_constrained: bool,
    /// Added to the protection floor in the stability-constrained mode so the
    /// drift inequality holds strictly.
    pub floor_slack: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_iterations: 100_000,
            update_scheme: UpdateScheme::InPlace,
            stability_constrained: false,
            floor_slack: 0.01,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::InvalidParams(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidParams("max_iterations must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.floor_slack) {
            return Err(Error::InvalidParams("floor_slack must lie in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub value: ValueTable,
    pub policy: ProtectPolicy,
    /// Number of sweeps over the grid.
    pub iterations: usize,
    /// Final sup-norm change.
    pub residual: f64,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

/// Result of one Bellman backup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backup {
    pub value: f64,
    /// Minimizing protection probability; ties go to the lower one.
    pub protect: f64,
}

/// Pre-bound solver state for one parameter set and grid.
struct Model<'a> {
    params: &'a SystemParams,
    uni: UniformizedParams,
    nb: Neighbors,
    /// Lowest admissible protection probability per state.
    floors: Vec<f64>,
}

impl<'a> Model<'a> {
    fn new(params: &'a SystemParams, grid: &Grid, config: &SolverConfig) -> Self {
        let floors = if config.stability_constrained && params.fault_prob > 0.0 {
            constrained_floors(params, grid, config.floor_slack)
        } else {
            vec![0.0; grid.len()]
        };
        Self { params, uni: uniformize(params), nb: Neighbors::new(grid), floors }
    }

    /// `a lambda~ (sum_i p_i J(x+e_i) - J(x+e_min))`: expected extra cost of
    /// leaving the arrival unprotected.
    #[inline]
    fn fault_gain(&self, j: &[f64], idx: usize) -> f64 {
        let routed: f64 = self.nb.ups(idx).iter().zip(&self.params.routing_probs).map(|(&u, p)| p * j[u]).sum();
        self.params.fault_prob * self.uni.lambda_tilde * (routed - j[self.nb.up_min[idx]])
    }

    #[inline]
    fn backup(&self, j: &[f64], idx: usize) -> Backup {
        let serve: f64 = self.nb.downs(idx).iter().map(|&d| j[d]).sum();
        let base = self.nb.norm1[idx] + self.uni.mu_tilde * serve + self.uni.lambda_tilde * j[self.nb.up_min[idx]];
        let gain = self.fault_gain(j, idx);
        let cb = self.params.protect_cost;
        let lo = self.floors[idx];
        let cost_lo = base + cb * lo + (1.0 - lo) * gain;
        let cost_hi = base + cb;
        if cost_lo <= cost_hi {
            Backup { value: cost_lo, protect: lo }
        } else {
            Backup { value: cost_hi, protect: 1.0 }
        }
    }

    /// One sweep; returns the sup-norm change.
    fn sweep(&self, j: &mut Vec<f64>, scheme: UpdateScheme) -> f64 {
        match scheme {
            UpdateScheme::InPlace => {
                let mut change: f64 = 0.0;
                for idx in 0..j.len() {
                    let v = self.backup(j, idx).value;
                    change = change.max((v - j[idx]).abs());
                    j[idx] = v;
                }
                change
            }
            UpdateScheme::Synchronous => {
                let next: Vec<f64> = (0..j.len()).into_par_iter().map(|idx| self.backup(j, idx).value).collect();
                let change = next.iter().zip(j.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                *j = next;
                change
            }
        }
    }

    fn greedy(&self, j: &[f64]) -> Vec<f64> {
        (0..j.len()).map(|idx| self.backup(j, idx).protect).collect()
    }
}

/// Protection floors used by the stability-constrained solver: zero on the
/// diagonal, `min(1, floor + slack)` where the floor binds.
fn constrained_floors(params: &SystemParams, grid: &Grid, slack: f64) -> Vec<f64> {
    grid.states()
        .map(|x| if x.is_diagonal() { 0.0 } else { (floor_unchecked(params, &x) + slack).clamp(0.0, 1.0) })
        .collect()
}

fn check_grid(params: &SystemParams, grid: &Grid) -> Result<()> {
    params.validate()?;
    if grid.n != params.n {
        return Err(Error::InvalidParams(format!("grid has n = {}, params have n = {}", grid.n, params.n)));
    }
    Ok(())
}

/// One backup of the uniformized Bellman operator at `x`.
pub fn bellman_backup(
    j: &ValueTable,
    x: &QueueState,
    params: &SystemParams,
    uni: &UniformizedParams,
) -> Result<Backup> {
    let grid = j.grid;
    grid.index_of(x)?;
    let mut gain_routed = 0.0;
    for (i, p) in params.routing_probs.iter().enumerate() {
        gain_routed += p * j.values[grid.index_unchecked(x.up_clamped(i, grid.bound).lengths())];
    }
    let up_min = j.values[grid.index_unchecked(x.up_clamped(x.argmin(), grid.bound).lengths())];
    let serve: f64 = (0..x.dim()).map(|i| j.values[grid.index_unchecked(x.down(i).lengths())]).sum();
    let base = x.norm1() as f64 + uni.mu_tilde * serve + uni.lambda_tilde * up_min;
    let gain = params.fault_prob * uni.lambda_tilde * (gain_routed - up_min);
    let cb = params.protect_cost;
    Ok(if gain <= cb { Backup { value: base + gain, protect: 0.0 } } else { Backup { value: base + cb, protect: 1.0 } })
}

/// Synchronous-or-in-place value iteration from `J = 0`.
pub fn value_iteration(params: &SystemParams, grid: &Grid, config: &SolverConfig) -> Result<SolveReport> {
    check_grid(params, grid)?;
    config.validate()?;
    let model = Model::new(params, grid, config);
    let mut j = vec![0.0; grid.len()];
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    while history.len() < config.max_iterations {
        residual = model.sweep(&mut j, config.update_scheme);
        history.push(residual);
        if residual < config.epsilon {
            converged = true;
            break;
        }
    }
    let policy = ProtectPolicy { grid: *grid, probs: model.greedy(&j) };
    Ok(SolveReport {
        value: ValueTable { grid: *grid, values: j },
        policy,
        iterations: history.len(),
        residual,
        converged,
        residual_history: history,
    })
}

/// Truncated policy iteration.
///
/// Each round runs sweeps of the optimistic evaluation step (which itself
/// minimizes over the protection action) until the change drops below
/// `epsilon`, then improves the policy with the threshold test
/// `a lambda~ (sum_i p_i J(x+e_i) - J(x+e_min)) <= c_b => low action`.
/// Rounds repeat until the policy is unchanged. In the stability-constrained
/// mode the low action is the protection floor rather than 0.
pub fn truncated_policy_iteration(params: &SystemParams, grid: &Grid, config: &SolverConfig) -> Result<SolveReport> {
    check_grid(params, grid)?;
    config.validate()?;
    let model = Model::new(params, grid, config);
    let mut j = vec![0.0; grid.len()];
    let mut policy = model.floors.clone();
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;
    let mut converged = false;
    'outer: loop {
        loop {
            if history.len() >= config.max_iterations {
                break 'outer;
            }
            residual = model.sweep(&mut j, config.update_scheme);
            history.push(residual);
            if residual < config.epsilon {
                break;
            }
        }
        let mut stable = true;
        for (idx, b) in policy.iter_mut().enumerate() {
            let improved = if model.fault_gain(&j, idx) <= params.protect_cost { model.floors[idx] } else { 1.0 };
            if improved != *b {
                stable = false;
                *b = improved;
            }
        }
        if stable {
            converged = true;
            break;
        }
    }
    Ok(SolveReport {
        value: ValueTable { grid: *grid, values: j },
        policy: ProtectPolicy { grid: *grid, probs: policy },
        iterations: history.len(),
        residual,
        converged,
        residual_history: history,
    })
}

pub fn solve(params: &SystemParams, grid: &Grid, config: &SolverConfig, method: Method) -> Result<SolveReport> {
    match method {
        Method::ValueIteration => value_iteration(params, grid, config),
        Method::TruncatedPolicyIteration => truncated_policy_iteration(params, grid, config),
    }
}

/// `Delta(x) = sum_i p_i J(x+e_i) - J(x+e_m)` with `m` the lowest-index
/// shortest queue. Fails on states whose upward successors would be clamped.
pub fn delta(j: &ValueTable, x: &QueueState, params: &SystemParams) -> Result<f64> {
    let grid = &j.grid;
    grid.index_of(x)?;
    if x.max_len() >= grid.bound {
        return Err(Error::BoundaryState(x.clone()));
    }
    let at = |y: QueueState| j.values[grid.index_unchecked(y.lengths())];
    let routed: f64 = params.routing_probs.iter().enumerate().map(|(i, p)| p * at(x.up(i))).sum();
    Ok(routed - at(x.up(x.argmin())))
}

/// Threshold form of the optimal action: protect iff
/// `Delta(x) > c_b / (a lambda~)`.
pub fn protects_by_threshold(delta: f64, params: &SystemParams, uni: &UniformizedParams) -> bool {
    params.fault_prob * uni.lambda_tilde * delta > params.protect_cost
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityViolation {
    pub state: QueueState,
    pub neighbor: QueueState,
    /// `Delta(state) - Delta(neighbor)`; positive means the neighbor dropped.
    pub magnitude: f64,
}

/// Check `Delta(x+e_i) >= Delta(x)` for `i != m` and `Delta(x-e_m) >= Delta(x)`
/// over interior state pairs.
pub fn monotonicity_audit(j: &ValueTable, params: &SystemParams, tol: f64) -> Vec<MonotonicityViolation> {
    let grid = j.grid;
    let mut out = Vec::new();
    for x in grid.interior_states() {
        let Ok(dx) = delta(j, &x, params) else { continue };
        let m = x.argmin();
        let mut neighbors: Vec<QueueState> = (0..grid.n).filter(|&i| i != m).map(|i| x.up(i)).collect();
        if x.lengths()[m] > 0 {
            neighbors.push(x.down(m));
        }
        for y in neighbors {
            if !grid.is_interior(&y) {
                continue;
            }
            let Ok(dy) = delta(j, &y, params) else { continue };
            if dy < dx - tol {
                out.push(MonotonicityViolation { state: x.clone(), neighbor: y, magnitude: dx - dy });
            }
        }
    }
    out
}

/// Same monotone structure checked directly on a policy map.
pub fn policy_monotonicity_violations(policy: &ProtectPolicy) -> Vec<(QueueState, QueueState)> {
    let grid = policy.grid;
    let mut out = Vec::new();
    for x in grid.interior_states() {
        let bx = policy.probs[grid.index_unchecked(x.lengths())];
        let m = x.argmin();
        let mut neighbors: Vec<QueueState> = (0..grid.n).filter(|&i| i != m).map(|i| x.up(i)).collect();
        if x.lengths()[m] > 0 {
            neighbors.push(x.down(m));
        }
        for y in neighbors.into_iter().filter(|y| grid.is_interior(y)) {
            if policy.probs[grid.index_unchecked(y.lengths())] < bx {
                out.push((x.clone(), y));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TippingCell {
    pub fault_prob: f64,
    pub protect_cost: f64,
    /// `None` when the solver did not converge for this cell.
    pub protects_somewhere: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TippingSweep {
    pub cells: Vec<TippingCell>,
    /// Pairs of cell indices `(i, j)` where cell `j` should protect whenever
    /// cell `i` does but does not.
    pub monotonicity_violations: Vec<(usize, usize)>,
}

/// Solve every `(a, c_b)` pair and report whether the optimal policy
/// protects at some interior state.
pub fn tipping_point_sweep(
    template: &SystemParams,
    grid: &Grid,
    config: &SolverConfig,
    method: Method,
    pairs: &[(f64, f64)],
) -> Result<TippingSweep> {
    let cells: Vec<TippingCell> = pairs
        .par_iter()
        .map(|&(a, cb)| {
            let params = SystemParams { fault_prob: a, protect_cost: cb, ..template.clone() };
            let protects = solve(&params, grid, config, method)
                .ok()
                .filter(|r| r.converged)
                .map(|r| grid.states().enumerate().any(|(idx, x)| grid.is_interior(&x) && r.policy.probs[idx] == 1.0));
            TippingCell { fault_prob: a, protect_cost: cb, protects_somewhere: protects }
        })
        .collect();
    for c in &cells {
        if c.fault_prob < 0.0 || c.fault_prob > 1.0 || c.protect_cost <= 0.0 {
            return Err(Error::InvalidParams(format!("bad sweep cell ({}, {})", c.fault_prob, c.protect_cost)));
        }
    }
    let mut violations = Vec::new();
    for (i, ci) in cells.iter().enumerate() {
        for (k, ck) in cells.iter().enumerate() {
            if ci.protects_somewhere != Some(true) || ck.protects_somewhere != Some(false) {
                continue;
            }
            // k dominates i in incentive: higher a at equal cost, or lower cost at equal a
            let more_faults = ck.protect_cost == ci.protect_cost && ck.fault_prob > ci.fault_prob;
            let cheaper = ck.fault_prob == ci.fault_prob && ck.protect_cost < ci.protect_cost;
            if more_faults || cheaper {
                violations.push((i, k));
            }
        }
    }
    Ok(TippingSweep { cells, monotonicity_violations: violations })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn qs(v: &[usize]) -> QueueState {
        QueueState::new(v.to_vec())
    }

    fn tiny() -> (SystemParams, Grid) {
        let p = SystemParams {
            fault_prob: 0.9,
            routing_probs: vec![0.1, 0.9],
            protect_cost: 0.1,
            ..SystemParams::two_server(1.0, 1.0, 1.0)
        };
        (p, Grid::new(2, 2, 1).unwrap())
    }

    fn tight() -> SolverConfig {
        SolverConfig { epsilon: 1e-11, ..SolverConfig::default() }
    }

    #[test]
    fn first_backup_is_queue_length() {
        let (p, g) = tiny();
        let j = ValueTable::zeros(g);
        let uni = uniformize(&p);
        for x in g.states() {
            let b = bellman_backup(&j, &x, &p, &uni).unwrap();
            assert_eq!(b.value, x.norm1() as f64);
            assert_eq!(b.protect, 0.0);
        }
        assert!(bellman_backup(&j, &qs(&[3, 0]), &p, &uni).is_err());
    }

    #[test]
    fn public_backup_agrees_with_solver_kernel() {
        let (p, g) = tiny();
        let r = value_iteration(&p, &g, &tight()).unwrap();
        let uni = uniformize(&p);
        for (idx, x) in g.states().enumerate() {
            let b = bellman_backup(&r.value, &x, &p, &uni).unwrap();
            assert!((b.value - r.value.values[idx]).abs() < 1e-9);
            assert_eq!(b.protect, r.policy.probs[idx]);
        }
    }

    #[test]
    fn no_faults_never_protects() {
        let (mut p, _) = tiny();
        p.fault_prob = 0.0;
        let g = Grid::new(2, 8, 2).unwrap();
        let r = value_iteration(&p, &g, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.policy.probs.iter().all(|&b| b == 0.0));
        let t = truncated_policy_iteration(&p, &g, &SolverConfig::default()).unwrap();
        assert!(t.policy.probs.iter().all(|&b| b == 0.0));
        // one evaluation round, then a single improvement pass that changes nothing
        let first = t.residual_history.iter().position(|&r| r < 1e-6).unwrap();
        assert_eq!(t.iterations, first + 1);
    }

    #[test]
    fn single_server_never_protects() {
        let p = SystemParams {
            n: 1,
            routing_probs: vec![1.0],
            fault_prob: 0.7,
            protect_cost: 0.01,
            ..SystemParams::two_server(0.5, 1.0, 0.5)
        };
        let g = Grid::new(1, 20, 4).unwrap();
        let r = value_iteration(&p, &g, &SolverConfig::default()).unwrap();
        assert!(r.policy.probs.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn symmetric_diagonal_does_not_protect() {
        let p = SystemParams { fault_prob: 0.8, protect_cost: 0.05, ..SystemParams::two_server(1.6, 1.0, 0.2) };
        let g = Grid::new(2, 12, 2).unwrap();
        let r = value_iteration(&p, &g, &tight()).unwrap();
        for (idx, x) in g.states().enumerate() {
            if x.is_diagonal() && x.max_len() < g.bound {
                assert_eq!(r.policy.probs[idx], 0.0, "protects at {x}");
                let d = delta(&r.value, &x, &p).unwrap();
                assert!(d.abs() < 1e-8, "delta {d} at {x}");
            }
        }
    }

    #[test]
    fn vi_and_tpi_agree() {
        let p = SystemParams {
            fault_prob: 0.9,
            routing_probs: vec![0.1, 0.9],
            protect_cost: 0.3,
            ..SystemParams::two_server(1.2, 1.0, 0.3)
        };
        let g = Grid::new(2, 10, 2).unwrap();
        let cfg = SolverConfig { epsilon: 1e-9, ..SolverConfig::default() };
        let vi = value_iteration(&p, &g, &SolverConfig { update_scheme: UpdateScheme::Synchronous, ..cfg }).unwrap();
        let tpi = truncated_policy_iteration(&p, &g, &cfg).unwrap();
        assert!(vi.converged && tpi.converged);
        let kappa = uniformize(&p).contraction;
        let slack = 10.0 * cfg.epsilon / (1.0 - kappa);
        assert!(vi.value.sup_distance(&tpi.value) < slack);
        assert_eq!(vi.policy, tpi.policy);
    }

    #[test]
    fn delta_of_first_iterate_vanishes() {
        let (p, _) = tiny();
        let g = Grid::new(2, 6, 1).unwrap();
        let j1 = ValueTable::from_fn(g, |x| x.norm1() as f64);
        for x in g.states().filter(|x| x.max_len() < g.bound) {
            assert!(delta(&j1, &x, &p).unwrap().abs() < 1e-12);
        }
        assert!(monotonicity_audit(&j1, &p, 1e-7).is_empty());
        assert!(matches!(delta(&j1, &qs(&[6, 0]), &p), Err(Error::BoundaryState(_))));
    }

    #[test]
    fn threshold_test_matches_greedy_policy() {
        let p = SystemParams {
            fault_prob: 0.9,
            routing_probs: vec![0.1, 0.9],
            protect_cost: 0.2,
            ..SystemParams::two_server(1.0, 1.0, 0.2)
        };
        let g = Grid::new(2, 14, 3).unwrap();
        let r = value_iteration(&p, &g, &tight()).unwrap();
        let uni = uniformize(&p);
        for (idx, x) in g.states().enumerate().filter(|(_, x)| x.max_len() < g.bound) {
            let d = delta(&r.value, &x, &p).unwrap();
            assert_eq!(protects_by_threshold(d, &p, &uni), r.policy.probs[idx] == 1.0);
        }
    }

    #[test]
    fn perturbed_table_fails_audit() {
        let p =
            SystemParams { fault_prob: 0.9, routing_probs: vec![0.1, 0.9], ..SystemParams::two_server(1.0, 1.0, 1.0) };
        let g = Grid::new(2, 10, 2).unwrap();
        let mut j = ValueTable::from_fn(g, |x| x.norm1() as f64);
        let idx = g.index_of(&qs(&[3, 5])).unwrap();
        j.values[idx] += 1.0;
        assert!(!monotonicity_audit(&j, &p, 1e-7).is_empty());
    }

    #[test]
    fn constrained_policy_respects_floor() {
        let p = SystemParams {
            fault_prob: 0.9,
            routing_probs: vec![0.1, 0.9],
            protect_cost: 2.0,
            ..SystemParams::two_server(1.6, 1.0, 0.5)
        };
        let g = Grid::new(2, 12, 2).unwrap();
        let cfg = SolverConfig { stability_constrained: true, ..SolverConfig::default() };
        let r = truncated_policy_iteration(&p, &g, &cfg).unwrap();
        assert!(r.converged);
        for (idx, x) in g.states().enumerate().filter(|(_, x)| !x.is_diagonal()) {
            let f = crate::stability::protect_floor(&p, &x).unwrap();
            assert!(r.policy.probs[idx] >= f, "b = {} < floor {f} at {x}", r.policy.probs[idx]);
        }
        let report = crate::stability::certify_policy(&p, &g, &r.policy, None).unwrap();
        assert!(report.stable_certificate);
    }

    #[test]
    fn non_convergence_is_reported() {
        let (p, g) = tiny();
        let cfg = SolverConfig { max_iterations: 3, epsilon: 1e-12, ..SolverConfig::default() };
        let r = value_iteration(&p, &g, &cfg).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        let t = truncated_policy_iteration(&p, &g, &cfg).unwrap();
        assert!(!t.converged);
    }

    #[test]
    fn tipping_sweep_zero_fault_column() {
        let p = SystemParams { routing_probs: vec![0.1, 0.9], ..SystemParams::two_server(1.6, 1.0, 0.5) };
        let g = Grid::new(2, 10, 2).unwrap();
        let pairs: Vec<(f64, f64)> =
            [0.0, 0.5, 0.9].iter().flat_map(|&a| [1e-4, 0.5, 5.0].into_iter().map(move |cb| (a, cb))).collect();
        let s =
            tipping_point_sweep(&p, &g, &SolverConfig::default(), Method::TruncatedPolicyIteration, &pairs).unwrap();
        for c in &s.cells {
            if c.fault_prob == 0.0 {
                assert_eq!(c.protects_somewhere, Some(false));
            }
            if c.fault_prob > 0.0 && c.protect_cost == 1e-4 {
                assert_eq!(c.protects_somewhere, Some(true));
            }
        }
        assert!(s.monotonicity_violations.is_empty());
    }
}
