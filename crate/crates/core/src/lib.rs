//! Freshness-aware caching: optimal eviction timers, an online model-based
//! learner, a tabular Q-learning baseline, and a discrete-event simulator to
//! compare them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod domain;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod mdp_oracle;
pub mod metrics;
pub mod optimal_policy;
pub mod policy;
pub mod qlearning;
pub mod stochastic;
pub mod swiftcache;

pub use config::{load_config, parse_config, to_flat, LoadedConfig};
pub use domain::{
    build_zipf_popularity, ensure_valid, validate, ArrivalLaw, Capacity, CostParams, DemandSpec,
    ItemCatalog, ScenarioConfig, Violation,
};
pub use engine::{run, simulate, RunOptions, SimulationReport};
pub use error::{Error, Result};
pub use optimal_policy::{optimal_cost_unlimited, solve_alpha, TimerPolicy};
pub use policy::{CachePolicy, Decision, PolicyOptions, PolicyRegistry};
