//! Static description of a caching scenario: the item catalog, the request
//! demand, the cost constants and the occupancy budget.
//!
//! Everything here is plain data. Types are constructed with public fields so
//! that invalid configurations can be represented and reported by
//! [`validate`] rather than rejected piecemeal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlearning::QConfig;
use crate::swiftcache::SwiftCacheConfig;

/// Tolerance on the popularity normalization.
pub const POPULARITY_SUM_TOL: f64 = 1e-9;

/// Sizes, popularity and refresh rates of the `N` items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub sizes: Vec<f64>,
    pub popularity: Vec<f64>,
    /// Mean backend updates per second for each item.
    pub refresh_rates: Vec<f64>,
}

impl ItemCatalog {
    /// Catalog where every item shares one size and one refresh rate.
    pub fn uniform_items(size: f64, refresh_rate: f64, popularity: Vec<f64>) -> Self {
        let n = popularity.len();
        ItemCatalog {
            sizes: vec![size; n],
            popularity,
            refresh_rates: vec![refresh_rate; n],
        }
    }

    pub fn n_items(&self) -> usize {
        self.popularity.len()
    }

    pub fn total_size(&self) -> f64 {
        self.sizes.iter().sum()
    }

    /// True when all items are interchangeable (same size, popularity and
    /// refresh rate).
    pub fn is_symmetric(&self) -> bool {
        fn all_eq(v: &[f64]) -> bool {
            v.windows(2).all(|w| w[0] == w[1])
        }
        all_eq(&self.sizes) && all_eq(&self.popularity) && all_eq(&self.refresh_rates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArrivalLaw {
    PoissonProcess,
    /// Renewal process with Gamma(shape `omega`, scale `1/(omega * rate)`)
    /// interarrival times.
    GammaRenewal { omega: f64 },
}

impl ArrivalLaw {
    /// Shape parameter; 1 for the Poisson process.
    pub fn shape(&self) -> f64 {
        match *self {
            ArrivalLaw::PoissonProcess => 1.0,
            ArrivalLaw::GammaRenewal { omega } => omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemandSpec {
    /// Aggregate request rate (requests/second).
    pub beta: f64,
    pub arrival_law: ArrivalLaw,
}

impl DemandSpec {
    pub fn poisson(beta: f64) -> Self {
        DemandSpec {
            beta,
            arrival_law: ArrivalLaw::PoissonProcess,
        }
    }

    pub fn gamma(beta: f64, omega: f64) -> Self {
        DemandSpec {
            beta,
            arrival_law: ArrivalLaw::GammaRenewal { omega },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Cost per size unit of fetching from the backend.
    pub fetch_unit_cost: f64,
    /// Cost per version of age when serving a stale copy.
    pub aging_unit_cost: f64,
}

/// Bound on the time-average, size-weighted cache occupancy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    Unlimited,
    Budget(f64),
}

impl Capacity {
    pub fn budget(&self) -> Option<f64> {
        match *self {
            Capacity::Unlimited => None,
            Capacity::Budget(b) => Some(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub catalog: ItemCatalog,
    pub demand: DemandSpec,
    pub costs: CostParams,
    pub capacity: Capacity,
    pub horizon_seconds: f64,
    pub seed: u64,
    /// Fraction of the horizon excluded from the "measured" metrics.
    pub warmup_frac: f64,
    /// Cadence of the report's time series; `None` disables sampling.
    pub sample_interval: Option<f64>,
    pub swiftcache: SwiftCacheConfig,
    pub qlearning: QConfig,
}

impl ScenarioConfig {
    /// Scenario with default learner settings, a 10% warm-up and no time
    /// series.
    pub fn new(
        catalog: ItemCatalog,
        demand: DemandSpec,
        costs: CostParams,
        capacity: Capacity,
        horizon_seconds: f64,
        seed: u64,
    ) -> Self {
        ScenarioConfig {
            catalog,
            demand,
            costs,
            capacity,
            horizon_seconds,
            seed,
            warmup_frac: 0.1,
            sample_interval: None,
            swiftcache: SwiftCacheConfig::default(),
            qlearning: QConfig::default(),
        }
    }

    /// Request rate `beta * p_n` of one item.
    pub fn item_rate(&self, item: usize) -> f64 {
        self.demand.beta * self.catalog.popularity[item]
    }
}

/// Zipf popularity `p_n ∝ 1/n^z`, normalized to sum to one.
pub fn build_zipf_popularity(n_items: usize, exponent: f64) -> Result<Vec<f64>> {
    if n_items == 0 {
        return Err(Error::invalid("n_items must be at least 1"));
    }
    if !(exponent >= 0.0) || !exponent.is_finite() {
        return Err(Error::invalid(format!(
            "zipf exponent must be finite and >= 0, got {exponent}"
        )));
    }
    let weights: Vec<f64> = (1..=n_items).map(|n| (n as f64).powf(-exponent)).collect();
    // Sum smallest-first to keep the normalization error small for large N.
    let total: f64 = weights.iter().rev().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// One violated invariant, addressed by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every invariant of the scenario types and returns all violations.
pub fn validate(config: &ScenarioConfig) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |path: &str, message: String| {
        out.push(Violation {
            path: path.to_string(),
            message,
        })
    };

    let cat = &config.catalog;
    let n = cat.popularity.len();
    if n == 0 {
        push("catalog.n_items", "catalog must contain at least one item".into());
    }
    if cat.sizes.len() != n {
        push(
            "catalog.sizes",
            format!("length {} does not match {} items", cat.sizes.len(), n),
        );
    }
    if cat.refresh_rates.len() != n {
        push(
            "catalog.refresh_rates",
            format!("length {} does not match {} items", cat.refresh_rates.len(), n),
        );
    }
    if n > 0 {
        let sum: f64 = cat.popularity.iter().sum();
        if !((sum - 1.0).abs() <= POPULARITY_SUM_TOL) {
            push("catalog.popularity", format!("popularity sum is {sum}, expected 1"));
        }
        if let Some(i) = cat.popularity.iter().position(|&p| !(p > 0.0)) {
            push(
                "catalog.popularity",
                format!("popularity must be positive (item {i} has {})", cat.popularity[i]),
            );
        }
    }
    if let Some(i) = cat.sizes.iter().position(|&b| !(b > 0.0) || !b.is_finite()) {
        push(
            "catalog.sizes",
            format!("sizes must be positive (item {i} has {})", cat.sizes[i]),
        );
    }
    if let Some(i) = cat
        .refresh_rates
        .iter()
        .position(|&l| !(l >= 0.0) || !l.is_finite())
    {
        push(
            "catalog.refresh_rates",
            format!(
                "refresh_rates nonnegative violated (item {i} has {})",
                cat.refresh_rates[i]
            ),
        );
    }

    if !(config.demand.beta >= 0.0) || !config.demand.beta.is_finite() {
        push("demand.beta", format!("must be >= 0, got {}", config.demand.beta));
    }
    if let ArrivalLaw::GammaRenewal { omega } = config.demand.arrival_law {
        if !(omega > 0.0) || !omega.is_finite() {
            push("demand.omega", format!("shape must be > 0, got {omega}"));
        }
    }
    if !(config.costs.fetch_unit_cost > 0.0) {
        push(
            "costs.fetch_unit",
            format!("must be > 0, got {}", config.costs.fetch_unit_cost),
        );
    }
    if !(config.costs.aging_unit_cost > 0.0) {
        push(
            "costs.aging_unit",
            format!("must be > 0, got {}", config.costs.aging_unit_cost),
        );
    }
    if let Capacity::Budget(b) = config.capacity {
        if !(b > 0.0) {
            push("capacity.budget", format!("finite budget must be > 0, got {b}"));
        }
    }
    if !(config.horizon_seconds > 0.0) || !config.horizon_seconds.is_finite() {
        push(
            "sim.horizon",
            format!("must be > 0, got {}", config.horizon_seconds),
        );
    }
    if !(0.0..1.0).contains(&config.warmup_frac) {
        push(
            "sim.warmup_frac",
            format!("must lie in [0, 1), got {}", config.warmup_frac),
        );
    }
    if let Some(dt) = config.sample_interval {
        if !(dt > 0.0) {
            push("sim.sample_interval", format!("must be > 0, got {dt}"));
        }
    }
    let theta = config.swiftcache.theta;
    if !(theta > 0.0 && theta < 1.0) {
        push("swiftcache.theta", format!("must lie in (0, 1), got {theta}"));
    }
    if !(config.swiftcache.tau_max > 0.0) {
        push(
            "swiftcache.tau_max",
            format!("must be > 0, got {}", config.swiftcache.tau_max),
        );
    }
    for (path, msg) in config.qlearning.violations() {
        push(path, msg);
    }
    out
}

/// [`validate`] as a `Result`, joining all violations into one message.
pub fn ensure_valid(config: &ScenarioConfig) -> Result<()> {
    let violations = validate(config);
    if violations.is_empty() {
        Ok(())
    } else {
        let joined: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(Error::config(joined.join("; ")))
    }
}
