//! Caching strategies behind one trait, looked up by name.
//!
//! The engine owns the cache contents and the cost accounting; a policy only
//! answers "serve or fetch?" at each request (and, for step-clocked
//! learners, "fetch now?" at idle clock ticks).

use std::cell::Cell;
use std::collections::BTreeMap;

use serde_json::Value;

use crate::domain::{CostParams, ItemCatalog, ScenarioConfig};
use crate::error::{Error, Result};
use crate::optimal_policy::solve_alpha;
use crate::qlearning::{
    encode_state, q_update, select_action, Action, ActionMode, QConfig, QState, QTableSet,
};
use crate::stochastic::{RngStream, StreamPurpose};
use crate::swiftcache::{SwiftCacheState, SwiftDecision};

/// What the engine knows when a request for `item` arrives.
#[derive(Debug, Clone, Copy)]
pub struct RequestContext {
    pub item: usize,
    pub now: f64,
    pub size: f64,
    /// Versions the backend has advanced since the item was last cached
    /// (0 if it never was).
    pub age: u64,
    pub ever_cached: bool,
    /// The item's holding time has not expired.
    pub present: bool,
    pub elapsed_since_fetch: Option<f64>,
    /// Size-weighted occupancy at `now`.
    pub occupancy: f64,
    pub costs: CostParams,
}

/// An idle step of the policy's clock for one item (no request in the step).
#[derive(Debug, Clone, Copy)]
pub struct TickContext {
    pub item: usize,
    pub now: f64,
    pub size: f64,
    pub elapsed_since_fetch: f64,
    pub costs: CostParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    Serve,
    /// Fetch a fresh copy and keep it for `hold` seconds (may be infinite).
    Fetch { hold: f64 },
}

pub trait CachePolicy: Send {
    fn name(&self) -> &str;

    fn on_request(&mut self, ctx: &RequestContext) -> Result<Decision>;

    /// Step length of the policy's decision clock, if it acts between
    /// requests.
    fn tick_interval(&self) -> Option<f64> {
        None
    }

    /// Whether ticks at `now` can change anything. Lets the engine skip the
    /// per-item tick loop once a learner is frozen and never fetches idle.
    fn wants_ticks(&self, _now: f64) -> bool {
        self.tick_interval().is_some()
    }

    /// Returns true to fetch the item at this tick.
    fn on_tick(&mut self, _ctx: &TickContext) -> Result<bool> {
        Ok(false)
    }

    /// Called when the catalog is replaced mid-run.
    fn on_catalog_change(&mut self, _catalog: &ItemCatalog, _now: f64) -> Result<()> {
        Ok(())
    }

    /// JSON snapshot of the policy's internal state.
    fn snapshot(&self) -> Result<Value> {
        Ok(Value::Null)
    }

    fn qtables(&self) -> Option<&QTableSet> {
        None
    }
}

/// Extra inputs some policies accept.
#[derive(Debug, Clone, Default)]
pub struct PolicyOptions {
    /// Pre-trained tables for the Q-learner.
    pub qtables: Option<QTableSet>,
    /// Time until which the Q-learner explores and updates. Defaults to
    /// `qlearning.train_horizon` for fresh tables and 0 for loaded ones.
    pub train_until: Option<f64>,
    /// Explicit holding times for the fixed-timer policy.
    pub timers: Option<Vec<f64>>,
}

pub type PolicyFactory = fn(&ScenarioConfig, &PolicyOptions) -> Result<Box<dyn CachePolicy>>;

struct RegistryEntry {
    description: &'static str,
    factory: PolicyFactory,
}

/// Name → constructor table for caching strategies.
pub struct PolicyRegistry {
    entries: BTreeMap<String, RegistryEntry>,
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        PolicyRegistry {
            entries: BTreeMap::new(),
        }
    }

    /// Registry with `timer`, `swiftcache` and `qlearning`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register(
            "timer",
            "fixed optimal timers computed from the true parameters",
            FixedTimerPolicy::from_config,
        );
        r.register(
            "swiftcache",
            "online EWMA estimates plugged into the optimal-timer formula",
            SwiftCachePolicy::from_config,
        );
        r.register(
            "qlearning",
            "tabular Q-learning on (age steps, request flag)",
            QLearningPolicy::from_config,
        );
        r
    }

    pub fn register(&mut self, name: &str, description: &'static str, factory: PolicyFactory) {
        self.entries.insert(
            name.to_string(),
            RegistryEntry {
                description,
                factory,
            },
        );
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn describe(&self) -> Vec<(&str, &'static str)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.description))
            .collect()
    }

    pub fn build(
        &self,
        name: &str,
        config: &ScenarioConfig,
        options: &PolicyOptions,
    ) -> Result<Box<dyn CachePolicy>> {
        let entry = self.entries.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.names().collect();
            Error::config(format!(
                "unknown policy '{name}' (known: {})",
                known.join(", ")
            ))
        })?;
        (entry.factory)(config, options)
    }
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Constant per-item holding times.
pub struct FixedTimerPolicy {
    timers: Vec<f64>,
    last_fetch: Vec<Option<f64>>,
}

impl FixedTimerPolicy {
    pub fn new(timers: Vec<f64>) -> Result<Self> {
        if timers.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::invalid("timers must be >= 0"));
        }
        let n = timers.len();
        Ok(FixedTimerPolicy {
            timers,
            last_fetch: vec![None; n],
        })
    }

    fn from_config(config: &ScenarioConfig, options: &PolicyOptions) -> Result<Box<dyn CachePolicy>> {
        let timers = match &options.timers {
            Some(t) if t.len() == config.catalog.n_items() => t.clone(),
            Some(t) => {
                return Err(Error::config(format!(
                    "{} timers given for {} items",
                    t.len(),
                    config.catalog.n_items()
                )))
            }
            None => {
                solve_alpha(
                    &config.catalog,
                    config.demand.beta,
                    &config.costs,
                    config.capacity,
                )?
                .timers
            }
        };
        Ok(Box::new(Self::new(timers)?))
    }

    pub fn timers(&self) -> &[f64] {
        &self.timers
    }
}

impl CachePolicy for FixedTimerPolicy {
    fn name(&self) -> &str {
        "timer"
    }

    fn on_request(&mut self, ctx: &RequestContext) -> Result<Decision> {
        let expired = match self.last_fetch[ctx.item] {
            None => true,
            Some(t) => ctx.now - t >= self.timers[ctx.item],
        };
        if expired {
            self.last_fetch[ctx.item] = Some(ctx.now);
            Ok(Decision::Fetch {
                hold: self.timers[ctx.item],
            })
        } else {
            Ok(Decision::Serve)
        }
    }

    fn snapshot(&self) -> Result<Value> {
        Ok(serde_json::json!({ "timers": self.timers }))
    }
}

pub struct SwiftCachePolicy {
    state: SwiftCacheState,
}

impl SwiftCachePolicy {
    pub fn new(state: SwiftCacheState) -> Self {
        SwiftCachePolicy { state }
    }

    fn from_config(config: &ScenarioConfig, _options: &PolicyOptions) -> Result<Box<dyn CachePolicy>> {
        let state = SwiftCacheState::new(
            config.catalog.sizes.clone(),
            config.costs,
            config.capacity.budget(),
            config.swiftcache,
        )?;
        Ok(Box::new(Self::new(state)))
    }

    pub fn state(&self) -> &SwiftCacheState {
        &self.state
    }
}

impl CachePolicy for SwiftCachePolicy {
    fn name(&self) -> &str {
        "swiftcache"
    }

    fn on_request(&mut self, ctx: &RequestContext) -> Result<Decision> {
        let decision = self
            .state
            .on_request(ctx.item, ctx.now, || ctx.occupancy, || ctx.age)?;
        Ok(match decision {
            SwiftDecision::Serve => Decision::Serve,
            SwiftDecision::Fetch { timer, .. } => Decision::Fetch { hold: timer },
        })
    }

    fn on_catalog_change(&mut self, catalog: &ItemCatalog, _now: f64) -> Result<()> {
        // Estimates carry over; only the known sizes are refreshed.
        self.state.set_sizes(catalog.sizes.clone())
    }

    fn snapshot(&self) -> Result<Value> {
        Ok(serde_json::to_value(&self.state)?)
    }
}

/// Pending transition of one item, completed at its next decision epoch.
#[derive(Debug, Clone, Copy)]
struct Pending {
    state: QState,
    action: Action,
    cost: f64,
}

/// Tabular Q-learner acting at requests and at idle clock ticks.
pub struct QLearningPolicy {
    cfg: QConfig,
    tables: QTableSet,
    pending: Vec<Option<Pending>>,
    train_until: f64,
    rng: RngStream,
    idle_fetch_possible: Cell<Option<bool>>,
}

impl QLearningPolicy {
    pub fn new(cfg: QConfig, tables: QTableSet, n_items: usize, train_until: f64, seed: u64) -> Self {
        QLearningPolicy {
            cfg: QConfig {
                train_horizon: train_until,
                ..cfg
            },
            tables,
            pending: vec![None; n_items],
            train_until,
            rng: RngStream::new(seed, None, StreamPurpose::Policy),
            idle_fetch_possible: Cell::new(None),
        }
    }

    fn from_config(config: &ScenarioConfig, options: &PolicyOptions) -> Result<Box<dyn CachePolicy>> {
        let n = config.catalog.n_items();
        let cfg = config.qlearning;
        let (tables, default_until) = match &options.qtables {
            Some(t) => {
                t.check_compatible(n, &cfg)?;
                (t.clone(), 0.0)
            }
            None => {
                let shared = cfg.share_table.unwrap_or_else(|| config.catalog.is_symmetric());
                (QTableSet::new(n, shared, &cfg), cfg.train_horizon)
            }
        };
        let train_until = options.train_until.unwrap_or(default_until);
        Ok(Box::new(Self::new(cfg, tables, n, train_until, config.seed)))
    }

    pub fn into_tables(self) -> QTableSet {
        self.tables
    }

    fn learning(&self, now: f64) -> bool {
        now < self.train_until
    }

    fn act(&mut self, item: usize, state: QState, now: f64, cost_of: impl Fn(Action) -> f64) -> Action {
        let learning = self.learning(now);
        let table_idx = self.tables.index(item);
        if learning {
            if let Some(p) = self.pending[item].take() {
                q_update(
                    &mut self.tables.tables[table_idx],
                    p.state,
                    p.action,
                    p.cost,
                    state,
                    self.cfg.learning_rate,
                    self.cfg.discount,
                );
            }
        }
        let mode = if learning {
            ActionMode::Train {
                epsilon: self.cfg.epsilon_at(now),
            }
        } else {
            ActionMode::Eval
        };
        let action = select_action(&self.tables.tables[table_idx], state, mode, &mut self.rng);
        self.pending[item] = learning.then(|| Pending {
            state,
            action,
            cost: cost_of(action),
        });
        action
    }
}

impl CachePolicy for QLearningPolicy {
    fn name(&self) -> &str {
        "qlearning"
    }

    fn on_request(&mut self, ctx: &RequestContext) -> Result<Decision> {
        let elapsed = match (ctx.ever_cached, ctx.elapsed_since_fetch) {
            (true, Some(e)) => e,
            // Nothing cached yet: the request has to be fetched.
            _ => {
                self.pending[ctx.item] = None;
                return Ok(Decision::Fetch {
                    hold: f64::INFINITY,
                });
            }
        };
        let state = encode_state(elapsed, true, &self.cfg)?;
        let fetch_cost = ctx.size * ctx.costs.fetch_unit_cost;
        let aging_cost = ctx.costs.aging_unit_cost * ctx.age as f64;
        let action = self.act(ctx.item, state, ctx.now, |a| match a {
            Action::Fetch => fetch_cost,
            Action::Keep => aging_cost,
        });
        Ok(match action {
            Action::Fetch => Decision::Fetch {
                hold: f64::INFINITY,
            },
            Action::Keep => Decision::Serve,
        })
    }

    fn tick_interval(&self) -> Option<f64> {
        Some(self.cfg.time_step)
    }

    fn wants_ticks(&self, now: f64) -> bool {
        if self.learning(now) {
            return true;
        }
        if let Some(v) = self.idle_fetch_possible.get() {
            return v;
        }
        let possible = self
            .tables
            .tables
            .iter()
            .any(|t| t.greedy_policy(false).contains(&Action::Fetch));
        self.idle_fetch_possible.set(Some(possible));
        possible
    }

    fn on_tick(&mut self, ctx: &TickContext) -> Result<bool> {
        let state = encode_state(ctx.elapsed_since_fetch, false, &self.cfg)?;
        let fetch_cost = ctx.size * ctx.costs.fetch_unit_cost;
        let action = self.act(ctx.item, state, ctx.now, |a| match a {
            Action::Fetch => fetch_cost,
            Action::Keep => 0.0,
        });
        Ok(action == Action::Fetch)
    }

    fn snapshot(&self) -> Result<Value> {
        Ok(serde_json::to_value(&self.tables)?)
    }

    fn qtables(&self) -> Option<&QTableSet> {
        Some(&self.tables)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Capacity, DemandSpec};

    fn config() -> ScenarioConfig {
        ScenarioConfig::new(
            ItemCatalog::uniform_items(1.0, 20.0, vec![0.5, 0.5]),
            DemandSpec::poisson(1.0),
            CostParams {
                fetch_unit_cost: 1.0,
                aging_unit_cost: 0.1,
            },
            Capacity::Unlimited,
            10.0,
            3,
        )
    }

    fn ctx(item: usize, now: f64) -> RequestContext {
        RequestContext {
            item,
            now,
            size: 1.0,
            age: 0,
            ever_cached: false,
            present: false,
            elapsed_since_fetch: None,
            occupancy: 0.0,
            costs: config().costs,
        }
    }

    #[test]
    fn registry_lists_and_builds_builtins() {
        let reg = PolicyRegistry::builtin();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["qlearning", "swiftcache", "timer"]);
        for name in ["qlearning", "swiftcache", "timer"] {
            let p = reg.build(name, &config(), &PolicyOptions::default()).unwrap();
            assert_eq!(p.name(), name);
        }
        assert!(matches!(
            reg.build("lru", &config(), &PolicyOptions::default()),
            Err(Error::Configuration(_))
        ));
    }

    #[test]
    fn custom_policy_can_be_registered() {
        struct AlwaysFetch;
        impl CachePolicy for AlwaysFetch {
            fn name(&self) -> &str {
                "always-fetch"
            }
            fn on_request(&mut self, _ctx: &RequestContext) -> Result<Decision> {
                Ok(Decision::Fetch { hold: 0.0 })
            }
        }
        let mut reg = PolicyRegistry::builtin();
        reg.register("always-fetch", "fetch on every request", |_, _| Ok(Box::new(AlwaysFetch)));
        let mut p = reg
            .build("always-fetch", &config(), &PolicyOptions::default())
            .unwrap();
        assert_eq!(p.on_request(&ctx(0, 1.0)).unwrap(), Decision::Fetch { hold: 0.0 });
    }

    #[test]
    fn fixed_timer_expiry() {
        let mut p = FixedTimerPolicy::new(vec![2.0]).unwrap();
        assert_eq!(p.on_request(&ctx(0, 1.0)).unwrap(), Decision::Fetch { hold: 2.0 });
        assert_eq!(p.on_request(&ctx(0, 2.5)).unwrap(), Decision::Serve);
        assert_eq!(p.on_request(&ctx(0, 3.0)).unwrap(), Decision::Fetch { hold: 2.0 });
    }

    #[test]
    fn fixed_timer_rejects_wrong_length() {
        let opts = PolicyOptions {
            timers: Some(vec![1.0]),
            ..Default::default()
        };
        assert!(PolicyRegistry::builtin().build("timer", &config(), &opts).is_err());
    }

    #[test]
    fn qlearning_shares_table_for_symmetric_catalog() {
        let reg = PolicyRegistry::builtin();
        let p = reg.build("qlearning", &config(), &PolicyOptions::default()).unwrap();
        assert!(p.qtables().unwrap().shared);
        let mut asym = config();
        asym.catalog.popularity = vec![0.7, 0.3];
        let p = reg.build("qlearning", &asym, &PolicyOptions::default()).unwrap();
        assert!(!p.qtables().unwrap().shared);
        assert_eq!(p.qtables().unwrap().tables.len(), 2);
    }

    #[test]
    fn qlearning_fetches_uncached_items() {
        let reg = PolicyRegistry::builtin();
        let mut p = reg.build("qlearning", &config(), &PolicyOptions::default()).unwrap();
        assert!(matches!(p.on_request(&ctx(1, 0.5)).unwrap(), Decision::Fetch { .. }));
    }

    #[test]
    fn frozen_learner_skips_ticks_when_it_never_fetches_idle() {
        let cfg = config();
        let tables = QTableSet::new(2, true, &cfg.qlearning);
        let opts = PolicyOptions {
            qtables: Some(tables),
            train_until: None,
            timers: None,
        };
        let p = PolicyRegistry::builtin().build("qlearning", &cfg, &opts).unwrap();
        assert!(!p.wants_ticks(1.0));
    }
}
