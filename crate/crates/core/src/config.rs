//! Flat `key = value` scenario files.
//!
//! ```text
//! # comment
//! catalog.n_items = 100
//! catalog.size = 10
//! catalog.popularity = zipf
//! catalog.zipf_exponent = 1.0
//! catalog.refresh_rate = 20
//! demand.beta = 5
//! costs.fetch_unit = 1
//! costs.aging_unit = 0.1
//! ```
//!
//! Lists are comma-separated, optionally in brackets. Values may be quoted.
//! Unknown keys are rejected; every error names the offending key.

use std::collections::BTreeMap;
use std::path::Path;

use crate::domain::{
    build_zipf_popularity, ensure_valid, ArrivalLaw, Capacity, CostParams, DemandSpec, ItemCatalog,
    ScenarioConfig,
};
use crate::error::{Error, Result};
use crate::optimal_policy::{analytic_occupancy, timers_for_multiplier};
use crate::qlearning::QConfig;
use crate::swiftcache::{RateEstimator, SwiftCacheConfig};

const KNOWN_KEYS: &[&str] = &[
    "catalog.n_items",
    "catalog.size",
    "catalog.sizes",
    "catalog.popularity",
    "catalog.zipf_exponent",
    "catalog.refresh_rate",
    "catalog.refresh_rates",
    "demand.beta",
    "demand.arrival",
    "demand.omega",
    "costs.fetch_unit",
    "costs.aging_unit",
    "capacity.budget",
    "capacity.budget_fraction",
    "sim.horizon",
    "sim.seed",
    "sim.warmup_frac",
    "sim.sample_interval",
    "swiftcache.theta",
    "swiftcache.tau_max",
    "swiftcache.rate_estimator",
    "qlearning.time_step",
    "qlearning.learning_rate",
    "qlearning.discount",
    "qlearning.epsilon_initial",
    "qlearning.epsilon_floor",
    "qlearning.epsilon_decay_frac",
    "qlearning.max_age_steps",
    "qlearning.train_horizon",
    "qlearning.share_table",
    "sweep.param",
    "sweep.values",
];

/// Optional sweep settings carried in a scenario file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSettings {
    pub param: Option<String>,
    pub values: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub scenario: ScenarioConfig,
    pub sweep: SweepSettings,
}

struct RawEntry {
    line: usize,
    value: String,
}

struct Raw {
    entries: BTreeMap<String, RawEntry>,
}

fn unquote(v: &str) -> &str {
    let v = v.trim();
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

fn strip_comment(line: &str) -> &str {
    let mut in_quote = None;
    for (i, c) in line.char_indices() {
        match (c, in_quote) {
            ('"' | '\'', None) => in_quote = Some(c),
            (c, Some(q)) if c == q => in_quote = None,
            ('#', None) => return &line[..i],
            _ => {}
        }
    }
    line
}

impl Raw {
    fn parse(text: &str) -> Result<Raw> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {lineno}: expected 'key = value', got '{line}'"))
            })?;
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::config(format!("line {lineno}: unknown key '{key}'")));
            }
            let value = unquote(value).to_string();
            if let Some(prev) = entries.insert(
                key.clone(),
                RawEntry {
                    line: lineno,
                    value,
                },
            ) {
                return Err(Error::config(format!(
                    "line {lineno}: key '{key}' already set on line {}",
                    prev.line
                )));
            }
        }
        Ok(Raw { entries })
    }

    fn get(&self, key: &str) -> Option<&RawEntry> {
        self.entries.get(key)
    }

    fn required(&self, key: &str) -> Result<&RawEntry> {
        self.get(key)
            .ok_or_else(|| Error::config(format!("missing required key '{key}'")))
    }

    fn bad(&self, key: &str, what: impl std::fmt::Display) -> Error {
        match self.get(key) {
            Some(e) => Error::config(format!("line {}: {key}: {what}", e.line)),
            None => Error::config(format!("{key}: {what}")),
        }
    }

    fn number(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => parse_f64(&e.value)
                .map(Some)
                .map_err(|_| self.bad(key, format!("expected a number, got '{}'", e.value))),
        }
    }

    fn required_number(&self, key: &str) -> Result<f64> {
        self.required(key)?;
        Ok(self.number(key)?.expect("present"))
    }

    fn integer(&self, key: &str) -> Result<Option<u64>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<u64>()
                .map(Some)
                .map_err(|_| self.bad(key, format!("expected a nonnegative integer, got '{}'", e.value))),
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(e) => split_list(&e.value)
                .iter()
                .map(|s| parse_f64(s))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| self.bad(key, format!("expected a list of numbers, got '{}'", e.value))),
        }
    }

    /// Scalar broadcast to `n` items or an explicit list.
    fn per_item(&self, scalar: &str, list: &str, n: usize) -> Result<Vec<f64>> {
        match (self.number(scalar)?, self.list(list)?) {
            (Some(_), Some(_)) => Err(self.bad(list, format!("set either '{scalar}' or '{list}', not both"))),
            (Some(v), None) => Ok(vec![v; n]),
            (None, Some(v)) => Ok(v),
            (None, None) => Err(Error::config(format!(
                "missing required key '{scalar}' (or '{list}')"
            ))),
        }
    }
}

fn parse_f64(s: &str) -> std::result::Result<f64, std::num::ParseFloatError> {
    let s = s.trim();
    match s {
        "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
        _ => s.parse::<f64>(),
    }
}

fn split_list(value: &str) -> Vec<&str> {
    let v = value.trim();
    let v = v.strip_prefix('[').and_then(|v| v.strip_suffix(']')).unwrap_or(v);
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

/// Occupancy of the unconstrained optimal timers.
pub fn unconstrained_occupancy(catalog: &ItemCatalog, beta: f64, costs: &CostParams) -> Result<f64> {
    let timers = timers_for_multiplier(catalog, beta, costs, 0.0)?;
    analytic_occupancy(&timers, catalog, beta)
}

/// Parses and validates a scenario file.
pub fn parse_config(text: &str) -> Result<LoadedConfig> {
    let raw = Raw::parse(text)?;

    let n_items = raw
        .integer("catalog.n_items")?
        .ok_or_else(|| Error::config("missing required key 'catalog.n_items'"))? as usize;
    if n_items == 0 {
        return Err(raw.bad("catalog.n_items", "must be at least 1"));
    }
    let sizes = raw.per_item("catalog.size", "catalog.sizes", n_items)?;
    let refresh_rates = raw.per_item("catalog.refresh_rate", "catalog.refresh_rates", n_items)?;
    let pop = raw.required("catalog.popularity")?;
    let zipf_exponent = raw.number("catalog.zipf_exponent")?;
    let popularity = match pop.value.as_str() {
        "zipf" => build_zipf_popularity(n_items, zipf_exponent.unwrap_or(1.0))
            .map_err(|e| raw.bad("catalog.zipf_exponent", e))?,
        "uniform" => vec![1.0 / n_items as f64; n_items],
        _ => raw.list("catalog.popularity")?.expect("present"),
    };
    if zipf_exponent.is_some() && pop.value != "zipf" {
        return Err(raw.bad("catalog.zipf_exponent", "only valid with 'catalog.popularity = zipf'"));
    }
    if popularity.len() != n_items {
        return Err(raw.bad(
            "catalog.popularity",
            format!("{} entries for {n_items} items", popularity.len()),
        ));
    }
    let catalog = ItemCatalog {
        sizes,
        popularity,
        refresh_rates,
    };

    let beta = raw.required_number("demand.beta")?;
    let omega = raw.number("demand.omega")?;
    let arrival = raw.get("demand.arrival").map(|e| e.value.as_str());
    let arrival_law = match (arrival, omega) {
        (None | Some("poisson"), None) => ArrivalLaw::PoissonProcess,
        (None | Some("gamma"), Some(omega)) => ArrivalLaw::GammaRenewal { omega },
        (Some("gamma"), None) => return Err(Error::config("missing required key 'demand.omega'")),
        (Some("poisson"), Some(_)) => {
            return Err(raw.bad("demand.omega", "not used with 'demand.arrival = poisson'"))
        }
        (Some(other), _) => {
            return Err(raw.bad("demand.arrival", format!("expected poisson or gamma, got '{other}'")))
        }
    };
    let demand = DemandSpec { beta, arrival_law };

    let costs = CostParams {
        fetch_unit_cost: raw.required_number("costs.fetch_unit")?,
        aging_unit_cost: raw.required_number("costs.aging_unit")?,
    };

    let capacity = match (raw.get("capacity.budget"), raw.number("capacity.budget_fraction")?) {
        (Some(_), Some(_)) => {
            return Err(raw.bad(
                "capacity.budget_fraction",
                "set either 'capacity.budget' or 'capacity.budget_fraction', not both",
            ))
        }
        (Some(e), None) if e.value == "unlimited" => Capacity::Unlimited,
        (Some(_), None) => Capacity::Budget(raw.number("capacity.budget")?.expect("present")),
        (None, Some(frac)) => {
            if !(frac > 0.0) {
                return Err(raw.bad("capacity.budget_fraction", format!("must be > 0, got {frac}")));
            }
            let b0 = unconstrained_occupancy(&catalog, beta, &costs)
                .map_err(|e| raw.bad("capacity.budget_fraction", e))?;
            if frac >= 1.0 || !b0.is_finite() {
                Capacity::Unlimited
            } else {
                Capacity::Budget(frac * b0)
            }
        }
        (None, None) => Capacity::Unlimited,
    };

    let mut scenario = ScenarioConfig::new(
        catalog,
        demand,
        costs,
        capacity,
        raw.number("sim.horizon")?.unwrap_or(1e5),
        raw.integer("sim.seed")?.unwrap_or(0),
    );
    if let Some(w) = raw.number("sim.warmup_frac")? {
        scenario.warmup_frac = w;
    }
    scenario.sample_interval = raw.number("sim.sample_interval")?;

    let mut sc = SwiftCacheConfig::default();
    if let Some(v) = raw.number("swiftcache.theta")? {
        sc.theta = v;
    }
    if let Some(v) = raw.number("swiftcache.tau_max")? {
        sc.tau_max = v;
    }
    if let Some(e) = raw.get("swiftcache.rate_estimator") {
        sc.rate_estimator = e
            .value
            .parse::<RateEstimator>()
            .map_err(|err| raw.bad("swiftcache.rate_estimator", err))?;
    }
    scenario.swiftcache = sc;

    let mut q = QConfig::default();
    let float_fields: [(&str, &mut f64); 7] = [
        ("qlearning.time_step", &mut q.time_step),
        ("qlearning.learning_rate", &mut q.learning_rate),
        ("qlearning.discount", &mut q.discount),
        ("qlearning.epsilon_initial", &mut q.epsilon_initial),
        ("qlearning.epsilon_floor", &mut q.epsilon_floor),
        ("qlearning.epsilon_decay_frac", &mut q.epsilon_decay_frac),
        ("qlearning.train_horizon", &mut q.train_horizon),
    ];
    for (key, slot) in float_fields {
        if let Some(v) = raw.number(key)? {
            *slot = v;
        }
    }
    if let Some(v) = raw.integer("qlearning.max_age_steps")? {
        q.max_age_steps = v as usize;
    }
    if let Some(e) = raw.get("qlearning.share_table") {
        q.share_table = match e.value.as_str() {
            "auto" => None,
            "true" => Some(true),
            "false" => Some(false),
            other => {
                return Err(raw.bad(
                    "qlearning.share_table",
                    format!("expected true, false or auto, got '{other}'"),
                ))
            }
        };
    }
    scenario.qlearning = q;

    // Report the first violation with its line when the key is in the file.
    if let Some(v) = crate::domain::validate(&scenario).into_iter().next() {
        let key = match v.path.as_str() {
            "catalog.sizes" if raw.get("catalog.size").is_some() => "catalog.size",
            "catalog.refresh_rates" if raw.get("catalog.refresh_rate").is_some() => {
                "catalog.refresh_rate"
            }
            p => p,
        };
        return Err(raw.bad(key, v.message));
    }
    ensure_valid(&scenario)?;

    let sweep = SweepSettings {
        param: raw.get("sweep.param").map(|e| e.value.clone()),
        values: raw
            .get("sweep.values")
            .map(|e| split_list(&e.value).into_iter().map(String::from).collect()),
    };
    Ok(LoadedConfig { scenario, sweep })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn list_text(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Serializes a scenario with explicit per-item lists. Parsing the output
/// reproduces the scenario exactly.
pub fn to_flat(config: &ScenarioConfig) -> String {
    let mut lines = vec![
        format!("catalog.n_items = {}", config.catalog.n_items()),
        format!("catalog.sizes = {}", list_text(&config.catalog.sizes)),
        format!("catalog.popularity = {}", list_text(&config.catalog.popularity)),
        format!("catalog.refresh_rates = {}", list_text(&config.catalog.refresh_rates)),
        format!("demand.beta = {}", config.demand.beta),
    ];
    match config.demand.arrival_law {
        ArrivalLaw::PoissonProcess => lines.push("demand.arrival = poisson".into()),
        ArrivalLaw::GammaRenewal { omega } => {
            lines.push("demand.arrival = gamma".into());
            lines.push(format!("demand.omega = {omega}"));
        }
    }
    lines.push(format!("costs.fetch_unit = {}", config.costs.fetch_unit_cost));
    lines.push(format!("costs.aging_unit = {}", config.costs.aging_unit_cost));
    lines.push(match config.capacity {
        Capacity::Unlimited => "capacity.budget = unlimited".into(),
        Capacity::Budget(b) => format!("capacity.budget = {b}"),
    });
    lines.push(format!("sim.horizon = {}", config.horizon_seconds));
    lines.push(format!("sim.seed = {}", config.seed));
    lines.push(format!("sim.warmup_frac = {}", config.warmup_frac));
    if let Some(dt) = config.sample_interval {
        lines.push(format!("sim.sample_interval = {dt}"));
    }
    let sc = &config.swiftcache;
    lines.push(format!("swiftcache.theta = {}", sc.theta));
    lines.push(format!("swiftcache.tau_max = {}", sc.tau_max));
    lines.push(format!("swiftcache.rate_estimator = {}", sc.rate_estimator.as_str()));
    let q = &config.qlearning;
    lines.push(format!("qlearning.time_step = {}", q.time_step));
    lines.push(format!("qlearning.learning_rate = {}", q.learning_rate));
    lines.push(format!("qlearning.discount = {}", q.discount));
    lines.push(format!("qlearning.epsilon_initial = {}", q.epsilon_initial));
    lines.push(format!("qlearning.epsilon_floor = {}", q.epsilon_floor));
    lines.push(format!("qlearning.epsilon_decay_frac = {}", q.epsilon_decay_frac));
    lines.push(format!("qlearning.max_age_steps = {}", q.max_age_steps));
    lines.push(format!("qlearning.train_horizon = {}", q.train_horizon));
    lines.push(format!(
        "qlearning.share_table = {}",
        match q.share_table {
            None => "auto",
            Some(true) => "true",
            Some(false) => "false",
        }
    ));
    lines.join("\n") + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BASE: &str = "\
catalog.n_items = 3
catalog.size = 10   # size units
catalog.popularity = zipf
catalog.refresh_rate = 20
demand.beta = 5
costs.fetch_unit = 1
costs.aging_unit = \"0.1\"
";

    #[test]
    fn parses_minimal_file() {
        let c = parse_config(BASE).unwrap().scenario;
        assert_eq!(c.catalog.sizes, vec![10.0; 3]);
        assert_eq!(c.catalog.refresh_rates, vec![20.0; 3]);
        assert!((c.catalog.popularity[0] - 6.0 / 11.0).abs() < 1e-15);
        assert_eq!(c.demand.arrival_law, ArrivalLaw::PoissonProcess);
        assert_eq!(c.costs.aging_unit_cost, 0.1);
        assert_eq!(c.capacity, Capacity::Unlimited);
    }

    #[test]
    fn missing_key_is_named() {
        let text = BASE.replace("demand.beta = 5\n", "");
        let err = parse_config(&text).unwrap_err().to_string();
        assert!(err.contains("demand.beta"), "{err}");
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        let err = parse_config(&format!("{BASE}costs.fetch = 2\n")).unwrap_err().to_string();
        assert!(err.contains("unknown key 'costs.fetch'") && err.contains("line 8"), "{err}");
        let err = parse_config(&format!("{BASE}demand.beta = 2\n")).unwrap_err().to_string();
        assert!(err.contains("already set"), "{err}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let err = parse_config(&BASE.replace("demand.beta = 5", "demand.beta = fast"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 5: demand.beta"), "{err}");
        let err = parse_config(&BASE.replace("catalog.refresh_rate = 20", "catalog.refresh_rate = -1"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("catalog.refresh_rate") && err.contains("nonnegative"), "{err}");
        let err = parse_config(&BASE.replace("catalog.popularity = zipf", "catalog.popularity = [0.5, 0.3, 0.1]"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("popularity sum"), "{err}");
    }

    #[test]
    fn gamma_and_budget_fraction() {
        let text = format!("{BASE}demand.omega = 0.5\ncapacity.budget_fraction = 0.5\n");
        let c = parse_config(&text).unwrap().scenario;
        assert_eq!(c.demand.arrival_law, ArrivalLaw::GammaRenewal { omega: 0.5 });
        let b0 = unconstrained_occupancy(&c.catalog, 5.0, &c.costs).unwrap();
        assert_eq!(c.capacity, Capacity::Budget(0.5 * b0));
    }

    #[test]
    fn sweep_settings_are_carried() {
        let text = format!("{BASE}sweep.param = omega\nsweep.values = [1, 0.1, 0.01]\n");
        let s = parse_config(&text).unwrap().sweep;
        assert_eq!(s.param.as_deref(), Some("omega"));
        assert_eq!(s.values.unwrap(), vec!["1", "0.1", "0.01"]);
    }

    proptest! {
        #[test]
        fn flat_round_trip(
            n in 1usize..6,
            z in 0.0f64..2.0,
            size in 0.1f64..100.0,
            lambda in 0.0f64..50.0,
            beta in 0.01f64..10.0,
            omega in prop::option::of(1e-3f64..2.0),
            budget in prop::option::of(0.1f64..100.0),
            seed in any::<u64>(),
            theta in 1e-4f64..0.5,
        ) {
            let mut c = ScenarioConfig::new(
                ItemCatalog::uniform_items(size, lambda, build_zipf_popularity(n, z).unwrap()),
                match omega {
                    Some(w) => DemandSpec::gamma(beta, w),
                    None => DemandSpec::poisson(beta),
                },
                CostParams { fetch_unit_cost: 1.0, aging_unit_cost: 0.1 },
                budget.map_or(Capacity::Unlimited, Capacity::Budget),
                1234.5,
                seed,
            );
            c.swiftcache.theta = theta;
            c.sample_interval = Some(7.0);
            let back = parse_config(&to_flat(&c)).unwrap().scenario;
            prop_assert_eq!(back, c);
        }
    }
}
