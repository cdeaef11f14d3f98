//! Closed-form eviction timers for Poisson demand with known parameters.
//!
//! Under Poisson requests the optimal policy keeps item `n` for a constant
//! holding time `τ_n` after each fetch. With request rate `r_n = βp_n`,
//!
//! ```text
//! τ_n(α̃) = (1/r_n) · [ sqrt(1 + 2 b_n (r_n c_f − α̃) / (c_a λ_n)) − 1 ]⁺
//! ```
//!
//! where `α̃ ≥ 0` prices the size-weighted occupancy
//! `B(τ) = Σ b_n r_n τ_n / (1 + r_n τ_n)`. [`solve_alpha`] finds the
//! multiplier that makes the budget tight, by bisection on the (monotone)
//! occupancy.
//!
//! Items that never change (`λ_n = 0`) get [`NEVER_EVICT`] whenever the
//! bracket is positive.

use serde::Serialize;

use crate::domain::{Capacity, CostParams, ItemCatalog};
use crate::error::{Error, Result};

/// Holding time of an item that is never evicted.
pub const NEVER_EVICT: f64 = f64::INFINITY;

/// Tolerance on `|B(τ(α̃*)) − B̃|` for a binding budget.
pub const BUDGET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimerPolicy {
    /// Per-item holding times (seconds); `NEVER_EVICT` serializes as null.
    pub timers: Vec<f64>,
    /// The occupancy multiplier α̃ that produced the timers.
    pub multiplier: f64,
    /// Average cost per second of the timers.
    pub analytic_cost: f64,
    /// Time-average size-weighted occupancy of the timers.
    pub analytic_occupancy: f64,
}

/// `sqrt(1 + x) − 1` without cancellation for small `x`.
#[inline]
pub(crate) fn sqrt1p_m1(x: f64) -> f64 {
    x / ((1.0 + x).sqrt() + 1.0)
}

/// Optimal holding time of one item for a given multiplier.
///
/// `request_rate` is `βp_n`.
pub fn compute_timer(
    size: f64,
    request_rate: f64,
    refresh_rate: f64,
    costs: &CostParams,
    multiplier: f64,
) -> Result<f64> {
    if !(request_rate > 0.0) || !request_rate.is_finite() {
        return Err(Error::invalid(format!(
            "request rate must be positive, got {request_rate}"
        )));
    }
    if !(size > 0.0) || !(refresh_rate >= 0.0) || !(multiplier >= 0.0) {
        return Err(Error::invalid(format!(
            "need size > 0, refresh rate >= 0, multiplier >= 0 (got {size}, {refresh_rate}, {multiplier})"
        )));
    }
    if !(costs.fetch_unit_cost >= 0.0) || !(costs.aging_unit_cost > 0.0) {
        return Err(Error::invalid("cost constants must be positive"));
    }
    let margin = request_rate * costs.fetch_unit_cost - multiplier;
    if margin <= 0.0 {
        return Ok(0.0);
    }
    if refresh_rate == 0.0 {
        return Ok(NEVER_EVICT);
    }
    let x = 2.0 * size * margin / (costs.aging_unit_cost * refresh_rate);
    Ok(sqrt1p_m1(x) / request_rate)
}

/// Timers of every item for one multiplier. Items with no demand get 0.
pub fn timers_for_multiplier(
    catalog: &ItemCatalog,
    beta: f64,
    costs: &CostParams,
    multiplier: f64,
) -> Result<Vec<f64>> {
    (0..catalog.n_items())
        .map(|n| {
            let rate = beta * catalog.popularity[n];
            if rate > 0.0 {
                compute_timer(
                    catalog.sizes[n],
                    rate,
                    catalog.refresh_rates[n],
                    costs,
                    multiplier,
                )
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

fn check_timers(catalog: &ItemCatalog, timers: &[f64]) -> Result<()> {
    if timers.len() != catalog.n_items() {
        return Err(Error::invalid(format!(
            "{} timers for {} items",
            timers.len(),
            catalog.n_items()
        )));
    }
    if let Some(t) = timers.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::invalid(format!("timers must be >= 0, got {t}")));
    }
    Ok(())
}

/// Long-run average cost per second of a timer policy,
/// `β Σ p_n (½ c_a λ_n p_n β τ_n² + b_n c_f) / (1 + β p_n τ_n)`.
pub fn analytic_cost(
    timers: &[f64],
    catalog: &ItemCatalog,
    beta: f64,
    costs: &CostParams,
) -> Result<f64> {
    check_timers(catalog, timers)?;
    let mut total = 0.0;
    for (n, &tau) in timers.iter().enumerate() {
        let r = beta * catalog.popularity[n];
        let lambda = catalog.refresh_rates[n];
        if r == 0.0 {
            continue;
        }
        if tau.is_infinite() {
            // One fetch ever; the aging term grows without bound unless static.
            if lambda > 0.0 {
                return Ok(f64::INFINITY);
            }
            continue;
        }
        let aging = 0.5 * costs.aging_unit_cost * lambda * r * r * tau * tau;
        let fetch = r * catalog.sizes[n] * costs.fetch_unit_cost;
        total += (aging + fetch) / (1.0 + r * tau);
    }
    Ok(total)
}

/// Size-weighted average occupancy `Σ b_n r_n τ_n / (1 + r_n τ_n)`.
pub fn analytic_occupancy(timers: &[f64], catalog: &ItemCatalog, beta: f64) -> Result<f64> {
    check_timers(catalog, timers)?;
    Ok(timers
        .iter()
        .enumerate()
        .map(|(n, &tau)| {
            let x = beta * catalog.popularity[n] * tau;
            let b = catalog.sizes[n];
            if x == 0.0 || x.is_nan() {
                0.0
            } else if x.is_infinite() {
                b
            } else {
                b * x / (1.0 + x)
            }
        })
        .sum())
}

/// Optimal average cost with an unlimited cache,
/// `Σ c_a λ_n (sqrt(1 + 2 b_n (r_n/λ_n)(c_f/c_a)) − 1)`.
///
/// Static items contribute nothing (one fetch, never stale).
pub fn optimal_cost_unlimited(catalog: &ItemCatalog, beta: f64, costs: &CostParams) -> f64 {
    (0..catalog.n_items())
        .map(|n| {
            let r = beta * catalog.popularity[n];
            let lambda = catalog.refresh_rates[n];
            let fetch = catalog.sizes[n] * r * costs.fetch_unit_cost;
            if fetch <= 0.0 || lambda <= 0.0 {
                return 0.0;
            }
            // c_a λ (sqrt(1+y) − 1) rewritten as 2 b r c_f / (sqrt(1+y) + 1).
            let y = 2.0 * fetch / (lambda * costs.aging_unit_cost);
            2.0 * fetch / ((1.0 + y).sqrt() + 1.0)
        })
        .sum()
}

fn policy_for(
    catalog: &ItemCatalog,
    beta: f64,
    costs: &CostParams,
    multiplier: f64,
) -> Result<TimerPolicy> {
    let timers = timers_for_multiplier(catalog, beta, costs, multiplier)?;
    Ok(TimerPolicy {
        analytic_cost: analytic_cost(&timers, catalog, beta, costs)?,
        analytic_occupancy: analytic_occupancy(&timers, catalog, beta)?,
        timers,
        multiplier,
    })
}

/// Optimal timers under an occupancy budget.
///
/// Returns `α̃ = 0` when the unconstrained timers already fit. Otherwise
/// bisects `α̃ ∈ [0, max_n βp_n c_f]` down to adjacent floating-point values
/// and returns the feasible end of the bracket.
pub fn solve_alpha(
    catalog: &ItemCatalog,
    beta: f64,
    costs: &CostParams,
    capacity: Capacity,
) -> Result<TimerPolicy> {
    let unconstrained = policy_for(catalog, beta, costs, 0.0)?;
    let budget = match capacity {
        Capacity::Unlimited => return Ok(unconstrained),
        Capacity::Budget(b) => b,
    };
    let has_demand = beta > 0.0 && catalog.popularity.iter().any(|&p| p > 0.0);
    if !(budget > 0.0) {
        if has_demand {
            return Err(Error::InfeasibleBudget(format!(
                "budget {budget} must be positive when there is demand"
            )));
        }
        return Ok(unconstrained);
    }
    if unconstrained.analytic_occupancy <= budget {
        return Ok(unconstrained);
    }

    let occupancy = |alpha: f64| -> Result<f64> {
        analytic_occupancy(
            &timers_for_multiplier(catalog, beta, costs, alpha)?,
            catalog,
            beta,
        )
    };
    let mut lo = 0.0_f64;
    let mut hi = catalog
        .popularity
        .iter()
        .map(|p| beta * p * costs.fetch_unit_cost)
        .fold(0.0, f64::max);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let occ = occupancy(mid)?;
        if occ > budget {
            lo = mid;
        } else {
            hi = mid;
            if (budget - occ) < BUDGET_TOL * 1e-3 {
                break;
            }
        }
    }
    policy_for(catalog, beta, costs, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    const COSTS: CostParams = CostParams {
        fetch_unit_cost: 1.0,
        aging_unit_cost: 0.1,
    };

    fn single_item() -> ItemCatalog {
        ItemCatalog::uniform_items(1.0, 20.0, vec![1.0])
    }

    // Frozen from a 40-digit evaluation of the closed forms with
    // b = 1, βp = 0.005, λ = 20, c_f = 1, c_a = 0.1.
    const TAU_STAR: f64 = 0.499_376_557_634_213_5;
    const COST_STAR: f64 = 0.004_993_765_576_342_135;
    const OCC_STAR: f64 = 0.002_490_663_892_367_097;

    #[test]
    fn timer_reference_value() {
        let tau = compute_timer(1.0, 5.0 * 0.001, 20.0, &COSTS, 0.0).unwrap();
        assert!((tau - TAU_STAR).abs() < 1e-13, "{tau}");
    }

    #[test]
    fn timer_clamps_at_zero() {
        assert_eq!(compute_timer(1.0, 0.005, 20.0, &COSTS, 0.005).unwrap(), 0.0);
        assert_eq!(compute_timer(1.0, 0.005, 20.0, &COSTS, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn timer_large_refresh_rate_limit() {
        let tau = compute_timer(1.0, 0.005, 1e6, &COSTS, 0.0).unwrap();
        let bound = 1.0 * 1.0 / (0.1 * 1e6);
        assert!(tau > 0.0 && tau < bound * (1.0 + 1e-12));
        assert!(tau > 0.99 * bound);
    }

    #[test]
    fn static_item_never_evicted() {
        assert_eq!(compute_timer(1.0, 0.5, 0.0, &COSTS, 0.0).unwrap(), NEVER_EVICT);
        assert_eq!(compute_timer(1.0, 0.5, 0.0, &COSTS, 0.6).unwrap(), 0.0);
        let cat = ItemCatalog::uniform_items(3.0, 0.0, vec![1.0]);
        let t = timers_for_multiplier(&cat, 1.0, &COSTS, 0.0).unwrap();
        assert_eq!(analytic_cost(&t, &cat, 1.0, &COSTS).unwrap(), 0.0);
        assert_eq!(analytic_occupancy(&t, &cat, 1.0).unwrap(), 3.0);
    }

    #[test]
    fn timer_rejects_bad_inputs() {
        assert!(compute_timer(1.0, 0.0, 20.0, &COSTS, 0.0).is_err());
        assert!(compute_timer(-1.0, 0.1, 20.0, &COSTS, 0.0).is_err());
        assert!(compute_timer(1.0, 0.1, 20.0, &COSTS, -0.1).is_err());
    }

    #[test]
    fn cost_reference_values() {
        let cat = ItemCatalog::uniform_items(1.0, 20.0, vec![0.001; 1]);
        let c = analytic_cost(&[TAU_STAR], &cat, 5.0, &COSTS).unwrap();
        assert!((c - COST_STAR).abs() < 1e-15, "{c}");
        assert!((optimal_cost_unlimited(&cat, 5.0, &COSTS) - COST_STAR).abs() < 1e-15);
        let occ = analytic_occupancy(&[TAU_STAR], &cat, 5.0).unwrap();
        assert!((occ - OCC_STAR).abs() < 1e-15, "{occ}");
    }

    #[test]
    fn zero_timers_fetch_every_request() {
        let cat = ItemCatalog {
            sizes: vec![1.0, 4.0],
            popularity: vec![0.75, 0.25],
            refresh_rates: vec![20.0, 3.0],
        };
        let c = analytic_cost(&[0.0, 0.0], &cat, 2.0, &COSTS).unwrap();
        assert!((c - 2.0 * (0.75 * 1.0 + 0.25 * 4.0)).abs() < 1e-15);
        assert_eq!(analytic_occupancy(&[0.0, 0.0], &cat, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn occupancy_half_at_unit_load() {
        let cat = ItemCatalog::uniform_items(6.0, 1.0, vec![1.0]);
        // βpτ = 1
        assert_eq!(analytic_occupancy(&[0.5], &cat, 2.0).unwrap(), 3.0);
    }

    #[test]
    fn doubling_fetch_cost_raises_cost() {
        let cat = single_item();
        let doubled = CostParams {
            fetch_unit_cost: 2.0,
            ..COSTS
        };
        let a = analytic_cost(&[0.3], &cat, 1.0, &COSTS).unwrap();
        let b = analytic_cost(&[0.3], &cat, 1.0, &doubled).unwrap();
        assert!(b > a);
    }

    #[test]
    fn unlimited_cost_degenerate_cases() {
        let cat = single_item();
        assert_eq!(optimal_cost_unlimited(&cat, 0.0, &COSTS), 0.0);
        let free = CostParams {
            fetch_unit_cost: 0.0,
            aging_unit_cost: 0.1,
        };
        assert_eq!(optimal_cost_unlimited(&cat, 3.0, &free), 0.0);
    }

    #[test]
    fn solve_alpha_slack_budgets() {
        let cat = ItemCatalog {
            sizes: vec![1.0, 1.0],
            popularity: vec![0.8, 0.2],
            refresh_rates: vec![20.0, 20.0],
        };
        let free = solve_alpha(&cat, 5.0, &COSTS, Capacity::Unlimited).unwrap();
        assert_eq!(free.multiplier, 0.0);
        assert_eq!(free.timers, timers_for_multiplier(&cat, 5.0, &COSTS, 0.0).unwrap());
        let roomy = solve_alpha(&cat, 5.0, &COSTS, Capacity::Budget(cat.total_size())).unwrap();
        assert_eq!(roomy.multiplier, 0.0);
    }

    #[test]
    fn solve_alpha_binding_budget() {
        let cat = ItemCatalog {
            sizes: vec![1.0, 1.0],
            popularity: vec![0.8, 0.2],
            refresh_rates: vec![20.0, 20.0],
        };
        let free = solve_alpha(&cat, 5.0, &COSTS, Capacity::Unlimited).unwrap();
        let budget = 0.5 * free.analytic_occupancy;
        let p = solve_alpha(&cat, 5.0, &COSTS, Capacity::Budget(budget)).unwrap();
        assert!(p.multiplier > 0.0 && p.multiplier <= 4.0);
        assert!((p.analytic_occupancy - budget).abs() < BUDGET_TOL);
        assert!(p.analytic_occupancy <= budget);
        assert!((p.multiplier * (p.analytic_occupancy - budget)).abs() < 1e-9);
        assert!(p.analytic_cost >= free.analytic_cost);
    }

    #[test]
    fn infeasible_budget() {
        let cat = single_item();
        assert!(matches!(
            solve_alpha(&cat, 1.0, &COSTS, Capacity::Budget(0.0)),
            Err(Error::InfeasibleBudget(_))
        ));
    }

    use proptest::prelude::*;

    fn catalog_strategy() -> impl Strategy<Value = (ItemCatalog, f64, CostParams)> {
        (1usize..8)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec(0.1f64..10.0, n),
                    proptest::collection::vec(0.01f64..1.0, n),
                    proptest::collection::vec(0.1f64..50.0, n),
                    0.1f64..10.0,
                    0.1f64..5.0,
                    0.01f64..2.0,
                )
            })
            .prop_map(|(sizes, w, lambdas, beta, cf, ca)| {
                let total: f64 = w.iter().sum();
                (
                    ItemCatalog {
                        sizes,
                        popularity: w.iter().map(|x| x / total).collect(),
                        refresh_rates: lambdas,
                    },
                    beta,
                    CostParams {
                        fetch_unit_cost: cf,
                        aging_unit_cost: ca,
                    },
                )
            })
    }

    proptest! {
        #[test]
        fn timer_monotone_in_inputs(b in 0.1f64..10.0, r in 0.001f64..5.0, lam in 0.1f64..50.0,
                                   cf in 0.1f64..5.0, ca in 0.01f64..2.0, a in 0.0f64..1.0) {
            let costs = CostParams { fetch_unit_cost: cf, aging_unit_cost: ca };
            let base = compute_timer(b, r, lam, &costs, a).unwrap();
            prop_assert!(compute_timer(b, r, lam, &costs, a * 1.1 + 1e-3).unwrap() <= base);
            prop_assert!(compute_timer(b, r, lam * 1.1, &costs, a).unwrap() <= base);
            prop_assert!(compute_timer(b * 1.1, r, lam, &costs, a).unwrap() >= base);
            let pricier = CostParams { fetch_unit_cost: cf * 1.1, ..costs };
            prop_assert!(compute_timer(b, r, lam, &pricier, a).unwrap() >= base);
            prop_assert!(base <= b * cf / (ca * lam) * (1.0 + 1e-12));
        }

        #[test]
        fn occupancy_non_increasing_in_multiplier((cat, beta, costs) in catalog_strategy(),
                                                  a in 0.0f64..2.0, da in 0.0f64..1.0) {
            let b1 = analytic_occupancy(&timers_for_multiplier(&cat, beta, &costs, a).unwrap(), &cat, beta).unwrap();
            let b2 = analytic_occupancy(&timers_for_multiplier(&cat, beta, &costs, a + da).unwrap(), &cat, beta).unwrap();
            prop_assert!(b2 <= b1 + 1e-12);
        }

        #[test]
        fn closed_form_cost_matches_substitution((cat, beta, costs) in catalog_strategy()) {
            let t = timers_for_multiplier(&cat, beta, &costs, 0.0).unwrap();
            let c = analytic_cost(&t, &cat, beta, &costs).unwrap();
            let star = optimal_cost_unlimited(&cat, beta, &costs);
            prop_assert!((c - star).abs() <= 1e-10 * star);
        }
    }
}
