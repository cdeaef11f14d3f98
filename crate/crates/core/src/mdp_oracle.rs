//! Finite per-item decision chain observed at request instants, solved by
//! discounted value iteration.
//!
//! States are ages `s ∈ 1..=s_max` counted in requests since the last fetch.
//! Keeping costs `κ s` and moves to `min(s + 1, s_max)`; fetching costs `F`
//! and restarts at age 1:
//!
//! ```text
//! v_m(s) = min{ κ s + q v_{m−1}(min(s+1, s_max)),  F + q v_{m−1}(1) }
//! ```
//!
//! The optimal policy is of threshold type in `s`; this module is the
//! reference the closed-form timers and the Q-learner are checked against.

use serde::Serialize;

use crate::domain::CostParams;
use crate::error::{Error, Result};
use crate::optimal_policy::compute_timer;
use crate::qlearning::Action;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerItemMdp {
    pub s_max: usize,
    /// `F = b c_f`
    pub fetch_cost: f64,
    /// `κ = c_a λ / (βp)`: expected aging cost per request-step of age.
    pub aging_slope: f64,
    pub discount: f64,
}

impl PerItemMdp {
    pub fn new(s_max: usize, fetch_cost: f64, aging_slope: f64, discount: f64) -> Result<Self> {
        if s_max < 2 {
            return Err(Error::invalid(format!("s_max must be >= 2, got {s_max}")));
        }
        if !(fetch_cost > 0.0) || !(aging_slope >= 0.0) || !aging_slope.is_finite() {
            return Err(Error::invalid(format!(
                "need F > 0 and κ >= 0 (got {fetch_cost}, {aging_slope})"
            )));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::invalid(format!("discount must lie in (0,1), got {discount}")));
        }
        Ok(PerItemMdp {
            s_max,
            fetch_cost,
            aging_slope,
            discount,
        })
    }

    /// Chain for a physical item. The cap is `max(4F/κ, 2) + 1` so that it
    /// never binds at the optimum.
    pub fn from_item(
        size: f64,
        request_rate: f64,
        refresh_rate: f64,
        costs: &CostParams,
        discount: f64,
    ) -> Result<Self> {
        if !(request_rate > 0.0) {
            return Err(Error::invalid("request rate must be positive"));
        }
        let fetch_cost = size * costs.fetch_unit_cost;
        let aging_slope = costs.aging_unit_cost * refresh_rate / request_rate;
        Self::new(
            default_cap(fetch_cost, aging_slope),
            fetch_cost,
            aging_slope,
            discount,
        )
    }
}

/// Smallest cap that keeps the threshold away from the boundary.
pub fn default_cap(fetch_cost: f64, aging_slope: f64) -> usize {
    if aging_slope > 0.0 {
        ((4.0 * fetch_cost / aging_slope).ceil() as usize).max(2) + 1
    } else {
        2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueIterationResult {
    /// `values[s - 1] = v(s)`
    pub values: Vec<f64>,
    pub policy: Vec<Action>,
    pub iterations: usize,
}

/// One Bellman backup from `prev` (indexed `s - 1`), with the greedy policy
/// of the backup. Ties go to keep.
pub fn bellman_step(mdp: &PerItemMdp, prev: &[f64]) -> (Vec<f64>, Vec<Action>) {
    let q = mdp.discount;
    let fetch = mdp.fetch_cost + q * prev[0];
    let mut values = Vec::with_capacity(mdp.s_max);
    let mut policy = Vec::with_capacity(mdp.s_max);
    for s in 1..=mdp.s_max {
        let next = s.min(mdp.s_max - 1);
        let keep = mdp.aging_slope * s as f64 + q * prev[next];
        if fetch < keep - 1e-12 * keep.abs().max(1.0) {
            values.push(fetch);
            policy.push(Action::Fetch);
        } else {
            values.push(keep);
            policy.push(Action::Keep);
        }
    }
    (values, policy)
}

/// Iterates from `v_0 = 0` until the sup-norm change drops below `tol`.
pub fn value_iteration(mdp: &PerItemMdp, tol: f64, max_iter: usize) -> Result<ValueIterationResult> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let mut values = vec![0.0; mdp.s_max];
    let mut last_change = f64::INFINITY;
    for iteration in 1..=max_iter {
        let (next, policy) = bellman_step(mdp, &values);
        last_change = next
            .iter()
            .zip(&values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        values = next;
        if last_change < tol {
            return Ok(ValueIterationResult {
                values,
                policy,
                iterations: iteration,
            });
        }
    }
    Err(Error::IterationLimit {
        max_iter,
        last_change,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Fetch exactly at ages above this value.
    At(usize),
    NotThreshold,
}

/// Smallest `s*` with keep at every `s ≤ s*` and fetch at every `s > s*`.
/// A policy that never fetches has threshold `s_max`.
pub fn extract_threshold(policy: &[Action]) -> Threshold {
    let first_fetch = policy.iter().position(|&a| a == Action::Fetch);
    match first_fetch {
        None => Threshold::At(policy.len()),
        Some(i) if policy[i..].iter().all(|&a| a == Action::Fetch) => Threshold::At(i),
        Some(_) => Threshold::NotThreshold,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrendPoint {
    pub discount: f64,
    pub threshold_steps: usize,
    /// Threshold in seconds: steps times the mean interarrival time.
    pub threshold_seconds: f64,
    pub closed_form_timer: f64,
}

/// Discrete thresholds for increasing discounts next to the closed-form
/// timer of the same item.
pub fn threshold_trend(
    size: f64,
    request_rate: f64,
    refresh_rate: f64,
    costs: &CostParams,
    discounts: &[f64],
) -> Result<Vec<TrendPoint>> {
    let closed_form_timer = compute_timer(size, request_rate, refresh_rate, costs, 0.0)?;
    discounts
        .iter()
        .map(|&q| {
            let mdp = PerItemMdp::from_item(size, request_rate, refresh_rate, costs, q)?;
            let max_iter = ((1e-12f64.ln() / q.ln()).ceil() as usize).max(100) * 4;
            let solved = value_iteration(&mdp, 1e-10, max_iter)?;
            let steps = match extract_threshold(&solved.policy) {
                Threshold::At(s) => s,
                Threshold::NotThreshold => {
                    return Err(Error::invalid("value iteration returned a non-threshold policy"))
                }
            };
            Ok(TrendPoint {
                discount: q,
                threshold_steps: steps,
                threshold_seconds: steps as f64 / request_rate,
                closed_form_timer,
            })
        })
        .collect()
}
