//! Tabular Q-learning over discretized time.
//!
//! The state of an item is `(s, r)`: the number of `time_step` intervals since
//! its last fetch (capped at `max_age_steps`) and whether a request is being
//! served. Actions are keep (0) and fetch (1). Values are costs, so the
//! bootstrap and the greedy rule both use the minimum.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp_oracle::PerItemMdp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    /// Discretization step in seconds.
    pub time_step: f64,
    pub learning_rate: f64,
    pub discount: f64,
    pub epsilon_initial: f64,
    pub epsilon_floor: f64,
    /// Fraction of the training horizon over which ε decays to its floor.
    pub epsilon_decay_frac: f64,
    pub max_age_steps: usize,
    pub train_horizon: f64,
    /// One table for all items; `None` shares only when the catalog is
    /// symmetric.
    pub share_table: Option<bool>,
}

impl Default for QConfig {
    fn default() -> Self {
        QConfig {
            time_step: 0.1,
            learning_rate: 0.1,
            discount: 0.99,
            epsilon_initial: 0.2,
            epsilon_floor: 0.01,
            epsilon_decay_frac: 0.5,
            max_age_steps: 600,
            train_horizon: 1e6,
            share_table: None,
        }
    }
}

impl QConfig {
    pub(crate) fn violations(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if !(self.time_step > 0.0) {
            v.push(("qlearning.time_step", format!("must be > 0, got {}", self.time_step)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            v.push((
                "qlearning.learning_rate",
                format!("must lie in (0, 1], got {}", self.learning_rate),
            ));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            v.push(("qlearning.discount", format!("must lie in (0, 1), got {}", self.discount)));
        }
        if !(0.0..=1.0).contains(&self.epsilon_initial) || !(0.0..=1.0).contains(&self.epsilon_floor)
        {
            v.push(("qlearning.epsilon_initial", "exploration rates must lie in [0, 1]".into()));
        }
        if !(self.epsilon_decay_frac > 0.0 && self.epsilon_decay_frac <= 1.0) {
            v.push((
                "qlearning.epsilon_decay_frac",
                format!("must lie in (0, 1], got {}", self.epsilon_decay_frac),
            ));
        }
        if self.max_age_steps < 2 {
            v.push(("qlearning.max_age_steps", format!("must be >= 2, got {}", self.max_age_steps)));
        }
        if !(self.train_horizon >= 0.0) {
            v.push(("qlearning.train_horizon", format!("must be >= 0, got {}", self.train_horizon)));
        }
        v
    }

    /// Exploration rate at `elapsed` seconds into training: exponential
    /// decay from `epsilon_initial` to `epsilon_floor` over
    /// `epsilon_decay_frac * train_horizon`, flat afterwards.
    pub fn epsilon_at(&self, elapsed: f64) -> f64 {
        let span = self.epsilon_decay_frac * self.train_horizon;
        if self.epsilon_initial <= self.epsilon_floor || span <= 0.0 {
            return self.epsilon_floor.min(self.epsilon_initial).max(0.0);
        }
        if elapsed >= span {
            return self.epsilon_floor;
        }
        let floor = self.epsilon_floor.max(1e-12);
        let rate = (self.epsilon_initial / floor).ln() / span;
        (self.epsilon_initial * (-rate * elapsed).exp()).max(self.epsilon_floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    Keep = 0,
    Fetch = 1,
}

impl Action {
    fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::Keep
        } else {
            Action::Fetch
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QState {
    /// 1-based age in steps.
    pub age_steps: usize,
    pub request: bool,
}

/// Maps an elapsed time since the last fetch to a state,
/// `s = min(ceil(elapsed / time_step), max_age_steps)`, with `s ≥ 1`.
pub fn encode_state(elapsed_since_fetch: f64, request_present: bool, cfg: &QConfig) -> Result<QState> {
    if !(elapsed_since_fetch >= 0.0) {
        return Err(Error::invalid(format!(
            "elapsed time must be >= 0, got {elapsed_since_fetch}"
        )));
    }
    let steps = (elapsed_since_fetch / cfg.time_step).ceil();
    let age_steps = if steps >= cfg.max_age_steps as f64 {
        cfg.max_age_steps
    } else {
        (steps as usize).max(1)
    };
    Ok(QState {
        age_steps,
        request: request_present,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActionMode {
    Train { epsilon: f64 },
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub max_age_steps: usize,
    /// `values[(s - 1) * 2 + r][u]`
    pub values: Vec<[f64; 2]>,
    pub visits: Vec<[u64; 2]>,
}

impl QTable {
    pub fn new(max_age_steps: usize) -> Self {
        QTable {
            max_age_steps,
            values: vec![[0.0; 2]; max_age_steps * 2],
            visits: vec![[0; 2]; max_age_steps * 2],
        }
    }

    #[inline]
    fn slot(&self, state: QState) -> usize {
        debug_assert!(state.age_steps >= 1 && state.age_steps <= self.max_age_steps);
        (state.age_steps - 1) * 2 + state.request as usize
    }

    pub fn q(&self, state: QState, action: Action) -> f64 {
        self.values[self.slot(state)][action.index()]
    }

    pub fn set_q(&mut self, state: QState, action: Action, value: f64) {
        let slot = self.slot(state);
        self.values[slot][action.index()] = value;
    }

    #[inline]
    pub fn min_q(&self, state: QState) -> f64 {
        let [a, b] = self.values[self.slot(state)];
        a.min(b)
    }

    /// Argmin with ties going to [`Action::Keep`].
    #[inline]
    pub fn greedy(&self, state: QState) -> Action {
        let [keep, fetch] = self.values[self.slot(state)];
        if fetch < keep {
            Action::Fetch
        } else {
            Action::Keep
        }
    }

    /// Greedy action for every age `1..=max_age_steps` at a fixed request flag.
    pub fn greedy_policy(&self, request: bool) -> Vec<Action> {
        (1..=self.max_age_steps)
            .map(|age_steps| self.greedy(QState { age_steps, request }))
            .collect()
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// `Q(S,u) ← Q(S,u) + α [R + γ min_u' Q(S',u') − Q(S,u)]`.
#[inline]
pub fn q_update(
    table: &mut QTable,
    state: QState,
    action: Action,
    cost: f64,
    next_state: QState,
    learning_rate: f64,
    discount: f64,
) {
    let target = cost + discount * table.min_q(next_state);
    let slot = table.slot(state);
    let entry = &mut table.values[slot][action.index()];
    *entry += learning_rate * (target - *entry);
    table.visits[slot][action.index()] += 1;
}

pub fn select_action<R: Rng + ?Sized>(
    table: &QTable,
    state: QState,
    mode: ActionMode,
    rng: &mut R,
) -> Action {
    match mode {
        ActionMode::Eval => table.greedy(state),
        ActionMode::Train { epsilon } => {
            if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                Action::from_index(rng.random_range(0..2))
            } else {
                table.greedy(state)
            }
        }
    }
}

/// Tables used by one run: either one shared table or one per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTableSet {
    pub shared: bool,
    pub time_step: f64,
    pub tables: Vec<QTable>,
}

impl QTableSet {
    pub fn new(n_items: usize, shared: bool, cfg: &QConfig) -> Self {
        let count = if shared { 1 } else { n_items };
        QTableSet {
            shared,
            time_step: cfg.time_step,
            tables: vec![QTable::new(cfg.max_age_steps); count],
        }
    }

    #[inline]
    pub fn index(&self, item: usize) -> usize {
        if self.shared {
            0
        } else {
            item
        }
    }

    pub fn for_item(&self, item: usize) -> &QTable {
        &self.tables[self.index(item)]
    }

    pub fn for_item_mut(&mut self, item: usize) -> &mut QTable {
        let i = self.index(item);
        &mut self.tables[i]
    }

    /// Checks that the tables fit a run with `n_items` items and `cfg`.
    pub fn check_compatible(&self, n_items: usize, cfg: &QConfig) -> Result<()> {
        if !self.shared && self.tables.len() != n_items {
            return Err(Error::config(format!(
                "Q-table set has {} per-item tables but the catalog has {n_items} items",
                self.tables.len()
            )));
        }
        if self.time_step != cfg.time_step
            || self.tables.iter().any(|t| t.max_age_steps != cfg.max_age_steps)
        {
            return Err(Error::config(
                "Q-table time step or state cap differs from the configuration",
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("bad Q-table file: {e}")))
    }
}

/// Trains a table directly on a per-item decision chain: every step is a
/// request at age `s`, keeping costs `κ s` and moves to `s + 1`, fetching
/// costs `F` and moves to 1. With probability `restart_prob` the walk jumps
/// to a uniformly random age so every state keeps being visited.
pub fn train_on_mdp<R: Rng + ?Sized>(
    mdp: &PerItemMdp,
    learning_rate: f64,
    epsilon: f64,
    restart_prob: f64,
    steps: usize,
    rng: &mut R,
) -> QTable {
    let mut table = QTable::new(mdp.s_max);
    let mut age = 1usize;
    for _ in 0..steps {
        if rng.random::<f64>() < restart_prob {
            age = rng.random_range(1..=mdp.s_max);
        }
        let state = QState {
            age_steps: age,
            request: true,
        };
        let action = select_action(&table, state, ActionMode::Train { epsilon }, rng);
        let (cost, next) = match action {
            Action::Keep => (mdp.aging_slope * age as f64, (age + 1).min(mdp.s_max)),
            Action::Fetch => (mdp.fetch_cost, 1),
        };
        let next_state = QState {
            age_steps: next,
            request: true,
        };
        q_update(&mut table, state, action, cost, next_state, learning_rate, mdp.discount);
        age = next;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stochastic::{RngStream, StreamPurpose};

    fn cfg() -> QConfig {
        QConfig::default()
    }

    fn st(age_steps: usize, request: bool) -> QState {
        QState { age_steps, request }
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_state(0.05, true, &cfg()).unwrap(), st(1, true));
        assert_eq!(encode_state(1e9, false, &cfg()).unwrap(), st(600, false));
        assert_eq!(encode_state(0.1, true, &cfg()).unwrap(), st(1, true));
        assert_eq!(encode_state(0.0, true, &cfg()).unwrap(), st(1, true));
        assert_eq!(encode_state(0.25, false, &cfg()).unwrap(), st(3, false));
        assert!(encode_state(-0.1, true, &cfg()).is_err());
    }

    #[test]
    fn update_examples() {
        let mut t = QTable::new(4);
        q_update(&mut t, st(1, true), Action::Keep, 1.0, st(2, true), 0.1, 0.9);
        assert!((t.q(st(1, true), Action::Keep) - 0.1).abs() < 1e-15);

        t.set_q(st(2, true), Action::Fetch, 7.0);
        t.set_q(st(3, false), Action::Keep, 2.0);
        t.set_q(st(3, false), Action::Fetch, 5.0);
        q_update(&mut t, st(2, true), Action::Fetch, 1.5, st(3, false), 1.0, 0.9);
        assert!((t.q(st(2, true), Action::Fetch) - (1.5 + 0.9 * 2.0)).abs() < 1e-15);
        assert_eq!(t.visits[t.slot(st(2, true))][1], 1);
    }

    #[test]
    fn zero_cost_decays_geometrically() {
        let mut t = QTable::new(2);
        t.set_q(st(1, true), Action::Keep, 1.0);
        for k in 1..=10 {
            q_update(&mut t, st(1, true), Action::Keep, 0.0, st(2, true), 0.5, 0.9);
            assert!((t.q(st(1, true), Action::Keep) - 0.5f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn greedy_examples() {
        let mut t = QTable::new(2);
        let mut rng = RngStream::new(1, None, StreamPurpose::Policy);
        t.set_q(st(1, true), Action::Keep, 2.0);
        t.set_q(st(1, true), Action::Fetch, 1.0);
        assert_eq!(select_action(&t, st(1, true), ActionMode::Eval, &mut rng), Action::Fetch);
        t.set_q(st(1, true), Action::Fetch, 2.0);
        assert_eq!(select_action(&t, st(1, true), ActionMode::Eval, &mut rng), Action::Keep);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let t = QTable::new(2);
        let mut rng = RngStream::new(4, None, StreamPurpose::Policy);
        let n = 10_000;
        let fetches = (0..n)
            .filter(|_| {
                select_action(&t, st(1, true), ActionMode::Train { epsilon: 1.0 }, &mut rng)
                    == Action::Fetch
            })
            .count() as f64;
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((fetches - n as f64 / 2.0).abs() < 3.0 * sigma, "{fetches}");
    }

    #[test]
    fn epsilon_schedule() {
        let c = QConfig {
            train_horizon: 100.0,
            ..cfg()
        };
        assert!((c.epsilon_at(0.0) - 0.2).abs() < 1e-15);
        assert!((c.epsilon_at(50.0) - 0.01).abs() < 1e-12);
        assert_eq!(c.epsilon_at(80.0), 0.01);
        assert!(c.epsilon_at(25.0) < 0.2 && c.epsilon_at(25.0) > 0.01);
    }

    #[test]
    fn config_violations() {
        let mut c = cfg();
        assert!(c.violations().is_empty());
        c.discount = 1.0;
        c.max_age_steps = 1;
        let paths: Vec<_> = c.violations().into_iter().map(|(p, _)| p).collect();
        assert_eq!(paths, ["qlearning.discount", "qlearning.max_age_steps"]);
    }

    #[test]
    fn table_set_round_trip_and_compat() {
        let mut set = QTableSet::new(3, false, &cfg());
        set.for_item_mut(2).set_q(st(5, true), Action::Fetch, -1.25);
        let back = QTableSet::from_json(&set.to_json().unwrap()).unwrap();
        assert_eq!(back, set);
        assert!(back.check_compatible(3, &cfg()).is_ok());
        assert!(back.check_compatible(4, &cfg()).is_err());
        let other = QConfig {
            max_age_steps: 10,
            ..cfg()
        };
        assert!(back.check_compatible(3, &other).is_err());
    }

    #[test]
    fn values_stay_bounded_on_mdp() {
        let mdp = PerItemMdp::new(20, 3.0, 1.0, 0.9).unwrap();
        let mut rng = RngStream::new(2, None, StreamPurpose::Policy);
        let t = train_on_mdp(&mdp, 0.1, 0.2, 0.1, 200_000, &mut rng);
        let max_cost = mdp.fetch_cost.max(mdp.aging_slope * mdp.s_max as f64);
        assert!(t.max_abs_value() <= max_cost / (1.0 - mdp.discount) + 1e-9);
    }
}
