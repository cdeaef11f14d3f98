//! Model-based online timer learning.
//!
//! The learner never sees popularity, demand or refresh rates. It keeps EWMA
//! estimates of each item's interarrival time (`eit`) and refresh rate
//! (`λ̂`) and plugs them into the optimal-timer formula,
//!
//! ```text
//! τ_n = eit_n · [ sqrt(1 + 2 b_n (c_f − eit_n α) / (c_a λ̂_n eit_n)) − 1 ]⁺
//! ```
//!
//! while `α` tracks how far the smoothed occupancy `B̄` sits above the
//! budget. Timers are recomputed only when an item is fetched.

use serde::{Deserialize, Serialize};

use crate::domain::CostParams;
use crate::error::{Error, Result};
use crate::optimal_policy::sqrt1p_m1;

/// Refresh-rate sample taken at each fetch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateEstimator {
    /// `δ / t`: versions elapsed since the previous fetch over the time
    /// since the previous fetch.
    #[default]
    AgeOverInterval,
    /// `(δ − Δ_n) / t` with `Δ_n` the age read at the previous fetch.
    /// Samples can be negative; the estimate is floored at zero.
    AgeDifference,
}

impl std::str::FromStr for RateEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "age_over_interval" => Ok(RateEstimator::AgeOverInterval),
            "age_difference" | "verbatim" => Ok(RateEstimator::AgeDifference),
            other => Err(Error::config(format!(
                "unknown rate estimator '{other}' (expected age_over_interval or age_difference)"
            ))),
        }
    }
}

impl RateEstimator {
    pub fn as_str(&self) -> &'static str {
        match self {
            RateEstimator::AgeOverInterval => "age_over_interval",
            RateEstimator::AgeDifference => "age_difference",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwiftCacheConfig {
    /// EWMA weight of the newest sample.
    pub theta: f64,
    /// Cap on holding times, also used when `λ̂ = 0`.
    pub tau_max: f64,
    pub rate_estimator: RateEstimator,
}

impl Default for SwiftCacheConfig {
    fn default() -> Self {
        SwiftCacheConfig {
            theta: 0.005,
            tau_max: 1e4,
            rate_estimator: RateEstimator::AgeOverInterval,
        }
    }
}

/// Holding time from the learned estimates.
///
/// `eit = 0` is the small-interarrival limit of the formula (τ → 0);
/// `λ̂ = 0` is its static-content limit, capped at `tau_max`.
pub fn holding_time(
    eit: f64,
    lambda_hat: f64,
    size: f64,
    costs: &CostParams,
    alpha: f64,
    tau_max: f64,
) -> f64 {
    if !(eit > 0.0) {
        return 0.0;
    }
    let margin = costs.fetch_unit_cost - eit * alpha;
    if margin <= 0.0 {
        return 0.0;
    }
    if !(lambda_hat > 0.0) {
        return tau_max;
    }
    let x = 2.0 * size * margin / (costs.aging_unit_cost * lambda_hat * eit);
    (eit * sqrt1p_m1(x)).min(tau_max)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SwiftDecision {
    Serve,
    /// Fetch; `age` is the reading taken from the backend, `timer` the new
    /// holding time.
    Fetch { age: u64, timer: f64 },
}

/// Complete learner state. Serializes to JSON for state dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwiftCacheState {
    pub eit: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    /// Age read at the last fetch.
    pub last_age: Vec<u64>,
    pub last_fetch: Vec<f64>,
    pub last_request: Vec<f64>,
    pub timers: Vec<f64>,
    pub occupancy_avg: f64,
    /// Most recent occupancy reading (taken at fetches).
    pub occupancy_reading: f64,
    pub alpha: f64,
    pub sizes: Vec<f64>,
    pub costs: CostParams,
    pub budget: Option<f64>,
    pub config: SwiftCacheConfig,
    max_eit: f64,
    max_eit_item: usize,
}

impl SwiftCacheState {
    pub fn new(
        sizes: Vec<f64>,
        costs: CostParams,
        budget: Option<f64>,
        config: SwiftCacheConfig,
    ) -> Result<Self> {
        if !(config.theta > 0.0 && config.theta < 1.0) {
            return Err(Error::invalid(format!("theta must lie in (0,1), got {}", config.theta)));
        }
        let n = sizes.len();
        Ok(SwiftCacheState {
            eit: vec![0.0; n],
            lambda_hat: vec![0.0; n],
            last_age: vec![0; n],
            last_fetch: vec![0.0; n],
            last_request: vec![0.0; n],
            timers: vec![0.0; n],
            occupancy_avg: 0.0,
            occupancy_reading: 0.0,
            alpha: 0.0,
            sizes,
            costs,
            budget,
            config,
            max_eit: 0.0,
            max_eit_item: 0,
        })
    }

    pub fn n_items(&self) -> usize {
        self.sizes.len()
    }

    /// Stored holding time of an item (recomputed only at fetches).
    pub fn current_timer(&self, item: usize) -> f64 {
        self.timers[item]
    }

    /// Largest positive `eit`, or 0 when no item has been seen twice.
    pub fn max_eit(&self) -> f64 {
        self.max_eit
    }

    pub fn set_sizes(&mut self, sizes: Vec<f64>) -> Result<()> {
        if sizes.len() != self.n_items() {
            return Err(Error::invalid("size vector length changed"));
        }
        self.sizes = sizes;
        Ok(())
    }

    /// Handles one request. `occupancy` and `age` are only queried when the
    /// item is fetched.
    pub fn on_request(
        &mut self,
        item: usize,
        now: f64,
        occupancy: impl FnOnce() -> f64,
        age: impl FnOnce() -> u64,
    ) -> Result<SwiftDecision> {
        if item >= self.n_items() {
            return Err(Error::invalid(format!("item {item} out of range")));
        }
        if now < self.last_request[item] {
            return Err(Error::invalid(format!(
                "request time {now} precedes the previous request {}",
                self.last_request[item]
            )));
        }
        let theta = self.config.theta;
        let since_fetch = now - self.last_fetch[item];
        let since_request = now - self.last_request[item];
        self.last_request[item] = now;

        let mut decision = SwiftDecision::Serve;
        if since_fetch >= self.timers[item] {
            let delta = age();
            self.occupancy_reading = occupancy();
            self.last_fetch[item] = now;
            if since_fetch > 0.0 {
                let sample = match self.config.rate_estimator {
                    RateEstimator::AgeOverInterval => delta as f64 / since_fetch,
                    RateEstimator::AgeDifference => {
                        (delta as f64 - self.last_age[item] as f64) / since_fetch
                    }
                };
                let next = (1.0 - theta) * self.lambda_hat[item] + theta * sample;
                self.lambda_hat[item] = next.max(0.0);
            }
            self.last_age[item] = delta;
            let mut timer = holding_time(
                self.eit[item],
                self.lambda_hat[item],
                self.sizes[item],
                &self.costs,
                self.alpha,
                self.config.tau_max,
            );
            if self.lambda_hat[item] == 0.0 {
                // No update observed yet: hold no longer than the interval
                // that produced the zero estimate, so one short quiet gap
                // cannot pin a stale copy for `tau_max`.
                timer = timer.min(since_fetch);
            }
            self.timers[item] = timer;
            decision = SwiftDecision::Fetch { age: delta, timer };
        }

        self.update_eit(item, (1.0 - theta) * self.eit[item] + theta * since_request);
        self.occupancy_avg = (1.0 - theta) * self.occupancy_avg + theta * self.occupancy_reading;
        self.alpha = match self.budget {
            Some(budget) if self.max_eit > 0.0 => {
                ((self.occupancy_avg - budget) / self.max_eit).max(0.0)
            }
            _ => 0.0,
        };
        Ok(decision)
    }

    fn update_eit(&mut self, item: usize, value: f64) {
        self.eit[item] = value;
        if value >= self.max_eit {
            self.max_eit = value;
            self.max_eit_item = item;
        } else if item == self.max_eit_item {
            let (idx, max) = self
                .eit
                .iter()
                .enumerate()
                .filter(|(_, e)| **e > 0.0)
                .fold((0, 0.0), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
            self.max_eit = max;
            self.max_eit_item = idx;
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
