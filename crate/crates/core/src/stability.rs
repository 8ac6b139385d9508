//! Foster-Lyapunov drift of `W(x) = 1/2 sum x_i^2` and the stability checks
//! built on it.
//!
//! Every bound here has the form `LW(x) <= -c ||x||_1 + d` with
//! `d = (lambda + n mu) / 2`, which caps the long-run mean number of jobs
//! at `d / c`. Grid certificates minimize `c` over the truncated grid only;
//! they are evidence on the audited region, not a proof for all states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttackStrategy, Grid, ProtectPolicy, QueueState, SystemParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictReason {
    CapacityViolated,
    FaultyRoutingOverload,
    DriftCertified,
    DriftFailedOnGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub stable: bool,
    pub reason: VerdictReason,
    /// Present iff `reason` is `DriftFailedOnGrid`.
    pub witness: Option<QueueState>,
    pub mean_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Smallest drift coefficient over the audited states.
    pub c: f64,
    pub d: f64,
    /// `d / c` when `c > 0`, infinite otherwise.
    pub mean_bound: f64,
    pub stable_certificate: bool,
    /// State attaining the minimum coefficient when it is not positive.
    pub witness: Option<QueueState>,
    pub audited_states: usize,
}

impl DriftReport {
    pub fn verdict(&self) -> StabilityVerdict {
        if self.stable_certificate {
            StabilityVerdict {
                stable: true,
                reason: VerdictReason::DriftCertified,
                witness: None,
                mean_bound: Some(self.mean_bound),
            }
        } else {
            StabilityVerdict {
                stable: false,
                reason: VerdictReason::DriftFailedOnGrid,
                witness: self.witness.clone(),
                mean_bound: None,
            }
        }
    }
}

fn drift_offset(params: &SystemParams) -> f64 {
    0.5 * (params.lambda + params.n as f64 * params.mu)
}

/// Exact stability test for the never-protected system plus its mean bound.
pub fn unprotected_stability(params: &SystemParams) -> StabilityVerdict {
    let n = params.n as f64;
    let (lambda, mu) = (params.lambda, params.mu);
    if lambda >= n * mu {
        return StabilityVerdict {
            stable: false,
            reason: VerdictReason::CapacityViolated,
            witness: None,
            mean_bound: None,
        };
    }
    let faulty_load = params.fault_prob * params.p_max() * lambda;
    if faulty_load >= mu {
        return StabilityVerdict {
            stable: false,
            reason: VerdictReason::FaultyRoutingOverload,
            witness: None,
            mean_bound: None,
        };
    }
    let c = mu - (params.fault_prob * params.p_max()).max(1.0 / n) * lambda;
    StabilityVerdict {
        stable: true,
        reason: VerdictReason::DriftCertified,
        witness: None,
        mean_bound: Some(drift_offset(params) / c),
    }
}

fn busy_servers(x: &QueueState) -> f64 {
    x.lengths().iter().filter(|&&v| v > 0).count() as f64
}

fn service_drift(params: &SystemParams, x: &QueueState) -> f64 {
    -params.mu * x.norm1() as f64 + 0.5 * params.mu * busy_servers(x)
}

/// Generator of `W` under reliability faults when arrivals at `x` are
/// protected with probability `b`.
pub fn reliability_drift(params: &SystemParams, x: &QueueState, b: f64) -> f64 {
    let faulty = params.fault_prob * (1.0 - b);
    let routed: f64 = params.routing_probs.iter().zip(x.lengths()).map(|(p, &xi)| p * xi as f64).sum();
    let lambda = params.lambda;
    faulty * lambda * routed + (1.0 - faulty) * lambda * x.min_len() as f64 + 0.5 * lambda + service_drift(params, x)
}

/// Generator of `W` when the attacker attacks with probability `a_x` and the
/// operator defends with probability `b_x`.
pub fn security_drift(params: &SystemParams, x: &QueueState, a_x: f64, b_x: f64) -> f64 {
    let hit = a_x * (1.0 - b_x);
    let lambda = params.lambda;
    hit * lambda * x.max_len() as f64
        + (1.0 - hit) * lambda * x.min_len() as f64
        + 0.5 * lambda
        + service_drift(params, x)
}

/// Smallest protection probability at `x` keeping the reliability drift
/// coefficient non-negative, clipped to `[0, 1]`.
///
/// At a non-diagonal `x` any `b` strictly above this value gives a negative
/// drift direction. When the queue-service margin `mu ||x||_1 - lambda x_min`
/// is not positive no probability suffices and 1 is returned.
pub fn protect_floor(params: &SystemParams, x: &QueueState) -> Result<f64> {
    if x.is_diagonal() {
        return Err(Error::DiagonalState(x.clone()));
    }
    Ok(floor_unchecked(params, x).clamp(0.0, 1.0))
}

/// Unclipped floor; may be negative (constraint slack) or `+inf`.
pub(crate) fn floor_unchecked(params: &SystemParams, x: &QueueState) -> f64 {
    let margin = params.mu * x.norm1() as f64 - params.lambda * x.min_len() as f64;
    let displacement = weighted_displacement(params, x);
    let denom = params.fault_prob * params.lambda * displacement;
    if margin <= 0.0 {
        return f64::INFINITY;
    }
    if denom <= 0.0 {
        return f64::NEG_INFINITY;
    }
    1.0 - margin / denom
}

fn weighted_displacement(params: &SystemParams, x: &QueueState) -> f64 {
    let routed: f64 = params.routing_probs.iter().zip(x.lengths()).map(|(p, &xi)| p * xi as f64).sum();
    routed - x.min_len() as f64
}

/// Largest `a(x)(1 - b(x))` compatible with negative drift at `x`.
pub fn attack_ceiling(params: &SystemParams, x: &QueueState) -> Result<f64> {
    if x.is_diagonal() {
        return Err(Error::DiagonalState(x.clone()));
    }
    let margin = params.mu * x.norm1() as f64 - params.lambda * x.min_len() as f64;
    Ok(margin / (params.lambda * (x.max_len() - x.min_len()) as f64))
}

/// Drift coefficient `c(x)` such that the generator is at most
/// `-c(x) ||x||_1 + d` at the non-zero state `x`.
pub fn drift_coefficient(params: &SystemParams, x: &QueueState, b: f64, attack: Option<f64>) -> f64 {
    let norm = x.norm1() as f64;
    let base = params.mu - params.lambda * x.min_len() as f64 / norm;
    let penalty = match attack {
        None => params.fault_prob * (1.0 - b) * params.lambda * weighted_displacement(params, x),
        Some(a) => a * (1.0 - b) * params.lambda * (x.max_len() - x.min_len()) as f64,
    };
    base - penalty / norm
}

/// Minimize the drift coefficient of a strategy pair over every non-zero
/// grid state. Without `attack` the reliability model is audited.
pub fn certify_policy(
    params: &SystemParams,
    grid: &Grid,
    policy: &ProtectPolicy,
    attack: Option<&AttackStrategy>,
) -> Result<DriftReport> {
    let mut best: Option<(f64, QueueState)> = None;
    let mut audited = 0;
    for (idx, x) in grid.states().enumerate() {
        if x.is_zero() {
            continue;
        }
        audited += 1;
        let a = attack.map(|s| s.probs[idx]);
        let c = drift_coefficient(params, &x, policy.probs[idx], a);
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, x));
        }
    }
    let (c, argmin) = best.ok_or(Error::EmptyAudit)?;
    let d = drift_offset(params);
    let certified = c > 0.0;
    Ok(DriftReport {
        c,
        d,
        mean_bound: if certified { d / c } else { f64::INFINITY },
        stable_certificate: certified,
        witness: (!certified).then_some(argmin),
        audited_states: audited,
    })
}
