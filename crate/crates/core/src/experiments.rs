//! Parameter sweeps and the popularity-shift scenario.

use std::str::FromStr;

use serde::Serialize;

use crate::config::unconstrained_occupancy;
use crate::domain::{ArrivalLaw, Capacity, ItemCatalog, ScenarioConfig};
use crate::engine::{run, run_replications, CatalogShift, RunOptions, SimulationReport, Summary};
use crate::error::{Error, Result};
use crate::metrics::{pct_increase_mf_vs_mb, pct_increase_vs_optimal, ExperimentResult};
use crate::optimal_policy::{optimal_cost_unlimited, solve_alpha, TimerPolicy};
use crate::policy::{PolicyOptions, PolicyRegistry};

/// Name used for the analytic optimum rows of a sweep.
pub const OPTIMAL_ROW: &str = "optimal";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Gamma shape of the interarrival times.
    Omega,
    /// Budget as a fraction of the unconstrained optimal occupancy;
    /// `inf` means unlimited.
    Budget,
    /// SwiftCache EWMA weight.
    Theta,
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "omega" => Ok(SweepParam::Omega),
            "budget" => Ok(SweepParam::Budget),
            "theta" => Ok(SweepParam::Theta),
            other => Err(Error::config(format!(
                "unknown sweep parameter '{other}' (expected omega, budget or theta)"
            ))),
        }
    }
}

/// Parses sweep values; `unlimited` maps to infinity.
pub fn parse_sweep_values<S: AsRef<str>>(values: &[S]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| {
            let v = v.as_ref().trim();
            match v {
                "unlimited" | "inf" => Ok(f64::INFINITY),
                _ => v
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("sweep value '{v}' is not a number"))),
            }
        })
        .collect()
}

/// Scenario with one parameter replaced.
pub fn apply_param(base: &ScenarioConfig, param: SweepParam, value: f64) -> Result<ScenarioConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::Omega => {
            cfg.demand.arrival_law = ArrivalLaw::GammaRenewal { omega: value };
        }
        SweepParam::Budget => {
            if !(value > 0.0) {
                return Err(Error::config(format!("budget fraction must be > 0, got {value}")));
            }
            cfg.capacity = if value.is_infinite() {
                Capacity::Unlimited
            } else {
                let b0 = unconstrained_occupancy(&cfg.catalog, cfg.demand.beta, &cfg.costs)?;
                if b0.is_finite() {
                    Capacity::Budget(value * b0)
                } else {
                    return Err(Error::config(
                        "budget fractions need a finite unconstrained occupancy",
                    ));
                }
            };
        }
        SweepParam::Theta => cfg.swiftcache.theta = value,
    }
    crate::domain::ensure_valid(&cfg)?;
    Ok(cfg)
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub policies: Vec<String>,
    pub runs: usize,
    pub seed_stride: u64,
}

/// Settings for runs that include a learner trained online: each run
/// covers `train` seconds of training followed by `eval` seconds measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainEval {
    pub train: f64,
    pub eval: f64,
}

impl TrainEval {
    /// `train` from `qlearning.train_horizon`, `eval` from the horizon.
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        TrainEval {
            train: cfg.qlearning.train_horizon,
            eval: cfg.horizon_seconds,
        }
    }

    /// Scenario spanning both windows, measuring only the second.
    pub fn timeline(&self, cfg: &ScenarioConfig) -> ScenarioConfig {
        let mut c = cfg.clone();
        c.horizon_seconds = self.train + self.eval;
        c.warmup_frac = self.train / (self.train + self.eval);
        c
    }
}

/// Per-seed rows plus an aggregate row for one policy at one parameter value.
pub fn replication_rows(
    param: f64,
    policy: &str,
    reports: &[SimulationReport],
    optimal: f64,
) -> Result<(Vec<ExperimentResult>, Summary)> {
    let mut rows = Vec::with_capacity(reports.len() + 1);
    for r in reports {
        rows.push(ExperimentResult {
            param,
            policy: policy.to_string(),
            seed: Some(r.seed),
            avg_cost_rate: r.measured.cost_rate,
            occupancy: r.measured.occupancy_average,
            pct_vs_optimal: Some(pct_increase_vs_optimal(r.measured.cost_rate, optimal)?),
            pct_mf_vs_mb: None,
            stderr: None,
        });
    }
    let rates: Vec<f64> = reports.iter().map(|r| r.measured.cost_rate).collect();
    let occ: Vec<f64> = reports.iter().map(|r| r.measured.occupancy_average).collect();
    let summary = Summary::of(&rates);
    rows.push(ExperimentResult {
        param,
        policy: policy.to_string(),
        seed: None,
        avg_cost_rate: summary.mean,
        occupancy: Summary::of(&occ).mean,
        pct_vs_optimal: Some(pct_increase_vs_optimal(summary.mean, optimal)?),
        pct_mf_vs_mb: None,
        stderr: Some(summary.stderr),
    });
    Ok((rows, summary))
}

/// Runs every policy at every value with common seeds.
///
/// Costs are compared with the unlimited-capacity optimum. An `optimal` row
/// per value gives the analytic cost and occupancy of the optimal timers
/// under that value's budget. When `qlearning` is among the policies every
/// policy runs on the train-then-evaluate timeline and the learner's rows
/// also carry the percentage against `swiftcache` on the same seed.
pub fn run_sweep(
    base: &ScenarioConfig,
    spec: &SweepSpec,
    registry: &PolicyRegistry,
) -> Result<Vec<ExperimentResult>> {
    if spec.runs == 0 {
        return Err(Error::config("need at least one run"));
    }
    let paired = spec.policies.iter().any(|p| p == "qlearning");
    let mut out = Vec::new();
    for &value in &spec.values {
        let cfg = apply_param(base, spec.param, value)?;
        let optimal = optimal_cost_unlimited(&cfg.catalog, cfg.demand.beta, &cfg.costs);
        let analytic = solve_alpha(&cfg.catalog, cfg.demand.beta, &cfg.costs, cfg.capacity)?;
        out.push(ExperimentResult {
            param: value,
            policy: OPTIMAL_ROW.to_string(),
            seed: None,
            avg_cost_rate: analytic.analytic_cost,
            occupancy: analytic.analytic_occupancy,
            pct_vs_optimal: Some(pct_increase_vs_optimal(analytic.analytic_cost, optimal)?),
            pct_mf_vs_mb: None,
            stderr: None,
        });

        let (run_cfg, train_until) = if paired {
            let te = TrainEval::from_config(&cfg);
            (te.timeline(&cfg), Some(te.train))
        } else {
            (cfg.clone(), None)
        };
        let mut per_policy: Vec<(String, Vec<ExperimentResult>)> = Vec::new();
        for name in &spec.policies {
            let options = PolicyOptions {
                train_until,
                ..Default::default()
            };
            let reps = run_replications(
                &run_cfg,
                |c| registry.build(name, c, &options),
                spec.runs,
                spec.seed_stride,
            )?;
            let (rows, _) = replication_rows(value, name, &reps.reports, optimal)?;
            per_policy.push((name.clone(), rows));
        }

        let mb = per_policy
            .iter()
            .find(|(n, _)| n == "swiftcache")
            .map(|(_, r)| r.clone());
        for (name, rows) in &mut per_policy {
            if name == "qlearning" {
                if let Some(mb) = &mb {
                    let mut pcts = Vec::new();
                    for (row, base_row) in rows.iter_mut().zip(mb) {
                        if row.seed.is_some() {
                            let p = pct_increase_mf_vs_mb(row.avg_cost_rate, base_row.avg_cost_rate)?;
                            row.pct_mf_vs_mb = Some(p);
                            pcts.push(p);
                        } else {
                            let agg = Summary::of(&pcts);
                            row.pct_mf_vs_mb = Some(agg.mean);
                        }
                    }
                }
            }
            out.append(rows);
        }
    }
    Ok(out)
}

/// How the catalog changes at the shift.
#[derive(Debug, Clone, PartialEq)]
pub enum ShiftKind {
    /// Item `i` takes the popularity of item `N − 1 − i`.
    ReversePopularity,
    /// Popularity moves `k` places to the right, cyclically.
    RotatePopularity(usize),
    ReverseRefresh,
    Replace(ItemCatalog),
}

impl ShiftKind {
    pub fn apply(&self, catalog: &ItemCatalog) -> ItemCatalog {
        let mut c = catalog.clone();
        match self {
            ShiftKind::ReversePopularity => c.popularity.reverse(),
            ShiftKind::RotatePopularity(k) => {
                let n = c.popularity.len();
                c.popularity.rotate_right(k % n.max(1));
            }
            ShiftKind::ReverseRefresh => c.refresh_rates.reverse(),
            ShiftKind::Replace(new) => c = new.clone(),
        }
        c
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" | "reverse_popularity" => Ok(ShiftKind::ReversePopularity),
            "reverse_refresh" => Ok(ShiftKind::ReverseRefresh),
            other => match other.strip_prefix("rotate:") {
                Some(k) => k
                    .parse()
                    .map(ShiftKind::RotatePopularity)
                    .map_err(|_| Error::config(format!("bad rotation '{k}'"))),
                None => Err(Error::config(format!(
                    "unknown shift '{other}' (expected reverse, reverse_refresh or rotate:K)"
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftRun {
    pub seed: u64,
    /// Cost rate after the shift, excluding the burn-in.
    pub shifted_rate: f64,
    /// Cost rate of a run that starts fresh on the new catalog, over a
    /// window of the same length after the same burn-in.
    pub fresh_rate: f64,
    pub relative_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftOutcome {
    pub policy: String,
    pub at: f64,
    pub burn_in: f64,
    pub runs: Vec<ShiftRun>,
    pub shifted: Summary,
    pub fresh: Summary,
    /// `|mean shifted − mean fresh| / mean fresh`
    pub relative_gap: f64,
}

/// Shifts the catalog at `at` and compares the post-shift cost rate with a
/// fresh start on the shifted catalog.
pub fn popularity_shift(
    config: &ScenarioConfig,
    kind: &ShiftKind,
    at: f64,
    burn_in: f64,
    policy: &str,
    runs: usize,
    registry: &PolicyRegistry,
) -> Result<ShiftOutcome> {
    if !(at > 0.0 && at + burn_in < config.horizon_seconds) {
        return Err(Error::config(format!(
            "shift at {at} plus burn-in {burn_in} must fall inside the horizon"
        )));
    }
    let shifted_catalog = kind.apply(&config.catalog);
    let mut fresh_cfg = config.clone();
    fresh_cfg.catalog = shifted_catalog.clone();
    fresh_cfg.horizon_seconds = config.horizon_seconds - at;
    crate::domain::ensure_valid(&fresh_cfg)?;

    use rayon::prelude::*;
    let results = (0..runs as u64)
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(k);
            let mut p = registry.build(policy, &cfg, &PolicyOptions::default())?;
            let opts = RunOptions {
                shifts: vec![CatalogShift {
                    at,
                    catalog: shifted_catalog.clone(),
                }],
                phase_burn_in: burn_in,
                ..Default::default()
            };
            let shifted = run(&cfg, p.as_mut(), &opts)?;

            let mut fresh = fresh_cfg.clone();
            fresh.seed = cfg.seed;
            let mut p = registry.build(policy, &fresh, &PolicyOptions::default())?;
            let opts = RunOptions {
                phase_burn_in: burn_in,
                ..Default::default()
            };
            let fresh_report = run(&fresh, p.as_mut(), &opts)?;
            let shifted_rate = shifted.phases[1].cost_rate;
            let fresh_rate = fresh_report.phases[0].cost_rate;
            Ok(ShiftRun {
                seed: cfg.seed,
                shifted_rate,
                fresh_rate,
                relative_gap: (shifted_rate - fresh_rate).abs() / fresh_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let shifted = Summary::of(&results.iter().map(|r| r.shifted_rate).collect::<Vec<_>>());
    let fresh = Summary::of(&results.iter().map(|r| r.fresh_rate).collect::<Vec<_>>());
    Ok(ShiftOutcome {
        policy: policy.to_string(),
        at,
        burn_in,
        runs: results,
        relative_gap: (shifted.mean - fresh.mean).abs() / fresh.mean,
        shifted,
        fresh,
    })
}

/// Analytic summary of a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct OptimalReport {
    pub unlimited_cost: f64,
    pub unconstrained_occupancy: f64,
    pub policy: TimerPolicy,
}

pub fn optimal_report(config: &ScenarioConfig) -> Result<OptimalReport> {
    let beta = config.demand.beta;
    Ok(OptimalReport {
        unlimited_cost: optimal_cost_unlimited(&config.catalog, beta, &config.costs),
        unconstrained_occupancy: unconstrained_occupancy(&config.catalog, beta, &config.costs)?,
        policy: solve_alpha(&config.catalog, beta, &config.costs, config.capacity)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{CostParams, DemandSpec};

    fn base() -> ScenarioConfig {
        let mut c = ScenarioConfig::new(
            ItemCatalog::uniform_items(1.0, 2.0, vec![0.5, 0.5]),
            DemandSpec::poisson(4.0),
            CostParams {
                fetch_unit_cost: 1.0,
                aging_unit_cost: 0.1,
            },
            Capacity::Unlimited,
            200.0,
            5,
        );
        c.qlearning.train_horizon = 100.0;
        c
    }

    #[test]
    fn sweep_values_parse() {
        assert_eq!(
            parse_sweep_values(&["1", "0.5", "unlimited"]).unwrap(),
            vec![1.0, 0.5, f64::INFINITY]
        );
        assert!(parse_sweep_values(&["x"]).is_err());
        assert!("depth".parse::<SweepParam>().is_err());
    }

    #[test]
    fn budget_fraction_scales_occupancy() {
        let c = apply_param(&base(), SweepParam::Budget, 0.5).unwrap();
        let b0 = unconstrained_occupancy(&c.catalog, 4.0, &c.costs).unwrap();
        assert_eq!(c.capacity, Capacity::Budget(0.5 * b0));
        let c = apply_param(&base(), SweepParam::Budget, f64::INFINITY).unwrap();
        assert_eq!(c.capacity, Capacity::Unlimited);
    }

    #[test]
    fn sweep_has_rows_for_every_policy_and_seed() {
        let spec = SweepSpec {
            param: SweepParam::Omega,
            values: vec![1.0, 0.5],
            policies: vec!["swiftcache".into(), "qlearning".into()],
            runs: 2,
            seed_stride: 1,
        };
        let rows = run_sweep(&base(), &spec, &PolicyRegistry::builtin()).unwrap();
        // optimal + 2 policies × (2 seeds + aggregate), per value
        assert_eq!(rows.len(), 2 * (1 + 2 * 3));
        let q: Vec<_> = rows.iter().filter(|r| r.policy == "qlearning").collect();
        assert!(q.iter().all(|r| r.pct_mf_vs_mb.is_some()));
    }

    #[test]
    fn shift_kinds() {
        let c = ItemCatalog {
            sizes: vec![1.0, 2.0, 3.0],
            popularity: vec![0.5, 0.3, 0.2],
            refresh_rates: vec![1.0, 2.0, 3.0],
        };
        assert_eq!(ShiftKind::ReversePopularity.apply(&c).popularity, vec![0.2, 0.3, 0.5]);
        assert_eq!(ShiftKind::RotatePopularity(1).apply(&c).popularity, vec![0.2, 0.5, 0.3]);
        assert_eq!(ShiftKind::ReverseRefresh.apply(&c).refresh_rates, vec![3.0, 2.0, 1.0]);
        assert_eq!("rotate:2".parse::<ShiftKind>().unwrap(), ShiftKind::RotatePopularity(2));
    }

    #[test]
    fn shift_outcome_compares_phases() {
        let out = popularity_shift(
            &base(),
            &ShiftKind::ReversePopularity,
            100.0,
            10.0,
            "timer",
            2,
            &PolicyRegistry::builtin(),
        )
        .unwrap();
        assert_eq!(out.runs.len(), 2);
        assert!(out.fresh.mean > 0.0 && out.shifted.mean > 0.0);
    }
}
