//! Discrete-event simulation of one cache under a policy.
//!
//! Each item has an independent request stream and version clock. The cache
//! starts empty. Occupancy is integrated exactly between events: a copy
//! counts from its fetch until its holding time runs out.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::domain::{ensure_valid, ItemCatalog, ScenarioConfig};
use crate::error::{Error, Result};
use crate::policy::{CachePolicy, Decision, RequestContext, TickContext};
use crate::stochastic::{next_interarrival, RngStream, StreamPurpose, VersionClock};

/// Replaces the catalog at `at`; the policy is told via
/// [`CachePolicy::on_catalog_change`].
#[derive(Debug, Clone)]
pub struct CatalogShift {
    pub at: f64,
    pub catalog: ItemCatalog,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub record_events: bool,
    /// Must be sorted by time.
    pub shifts: Vec<CatalogShift>,
    /// Time after each phase start excluded from that phase's statistics.
    pub phase_burn_in: f64,
}

/// Totals over a time window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowStats {
    pub start: f64,
    pub end: f64,
    pub total_cost: f64,
    pub fetch_cost: f64,
    pub aging_cost: f64,
    pub cost_rate: f64,
    pub occupancy_average: f64,
    pub requests: u64,
    pub fetches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Sample {
    pub time: f64,
    pub running_avg_cost: f64,
    pub occupancy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Request,
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub item: usize,
    pub kind: EventKind,
    pub age: u64,
    pub fetched: bool,
    pub charge: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub policy: String,
    pub seed: u64,
    pub config_hash: String,
    pub duration: f64,
    pub total_cost: f64,
    pub fetch_cost: f64,
    pub aging_cost: f64,
    pub avg_cost_rate: f64,
    pub occupancy_time_average: f64,
    pub request_count: u64,
    pub fetch_count: u64,
    pub per_item_requests: Vec<u64>,
    pub per_item_fetches: Vec<u64>,
    /// Statistics after the warm-up fraction.
    pub measured: WindowStats,
    /// One entry per catalog phase, each starting after the burn-in.
    pub phases: Vec<WindowStats>,
    pub samples: Vec<Sample>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<EventRecord>,
}

impl SimulationReport {
    /// Event log as CSV (`time,item,kind,age,action,charge`).
    pub fn events_csv(&self) -> String {
        let mut out = String::from("time,item,kind,age,action,charge\n");
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Request => "request",
                EventKind::Tick => "tick",
            };
            let action = if e.fetched { "fetch" } else { "serve" };
            let _ = writeln!(out, "{},{},{},{},{},{}", e.time, e.item, kind, e.age, action, e.charge);
        }
        out
    }
}

/// Short SHA-256 digest of the serialized configuration.
pub fn config_hash(config: &ScenarioConfig) -> Result<String> {
    let text = serde_json::to_string(config)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Time(f64);

impl Eq for Time {}

impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Default)]
struct Entry {
    ever_cached: bool,
    cached_version: u64,
    fetched_at: f64,
    /// Present in the occupancy sum.
    counted: bool,
    counted_size: f64,
    generation: u64,
}

struct Window {
    start: f64,
    end: f64,
    fetch_cost: f64,
    aging_cost: f64,
    occupancy_integral: f64,
    requests: u64,
    fetches: u64,
}

impl Window {
    fn new(start: f64, end: f64) -> Self {
        Window {
            start,
            end,
            fetch_cost: 0.0,
            aging_cost: 0.0,
            occupancy_integral: 0.0,
            requests: 0,
            fetches: 0,
        }
    }

    fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    fn integrate(&mut self, a: f64, b: f64, level: f64) {
        let lo = a.max(self.start);
        let hi = b.min(self.end);
        if hi > lo {
            self.occupancy_integral += level * (hi - lo);
        }
    }

    fn stats(&self) -> WindowStats {
        let len = self.end - self.start;
        let total = self.fetch_cost + self.aging_cost;
        let per = |x: f64| if len > 0.0 { x / len } else { 0.0 };
        WindowStats {
            start: self.start,
            end: self.end,
            total_cost: total,
            fetch_cost: self.fetch_cost,
            aging_cost: self.aging_cost,
            cost_rate: per(total),
            occupancy_average: per(self.occupancy_integral),
            requests: self.requests,
            fetches: self.fetches,
        }
    }
}

struct Sim<'a> {
    config: &'a ScenarioConfig,
    catalog: ItemCatalog,
    rates: Vec<f64>,
    clocks: Vec<VersionClock>,
    version_rngs: Vec<RngStream>,
    arrival_rngs: Vec<RngStream>,
    arrivals: BinaryHeap<Reverse<(Time, usize)>>,
    expiries: BinaryHeap<Reverse<(Time, usize, u64)>>,
    entries: Vec<Entry>,
    last_request: Vec<f64>,
    occupancy: f64,
    counted_items: usize,
    clock: f64,
    windows: Vec<Window>,
    per_item_requests: Vec<u64>,
    per_item_fetches: Vec<u64>,
    events: Vec<EventRecord>,
    record_events: bool,
}

impl<'a> Sim<'a> {
    fn request_rates(config: &ScenarioConfig, catalog: &ItemCatalog) -> Vec<f64> {
        catalog
            .popularity
            .iter()
            .map(|p| config.demand.beta * p)
            .collect()
    }

    fn schedule_all(&mut self, from: f64) -> Result<()> {
        self.arrivals.clear();
        let law = self.config.demand.arrival_law;
        for i in 0..self.catalog.n_items() {
            if self.rates[i] > 0.0 {
                let dt = next_interarrival(&mut self.arrival_rngs[i], law, self.rates[i])?;
                self.arrivals.push(Reverse((Time(from + dt), i)));
            }
        }
        Ok(())
    }

    /// Integrates occupancy up to `to`, retiring expired copies on the way.
    fn advance_to(&mut self, to: f64) {
        while let Some(&Reverse((Time(t), item, generation))) = self.expiries.peek() {
            if t > to {
                break;
            }
            self.expiries.pop();
            let entry = &self.entries[item];
            if entry.generation != generation || !entry.counted {
                continue;
            }
            self.integrate_until(t);
            let entry = &mut self.entries[item];
            entry.counted = false;
            self.occupancy -= entry.counted_size;
            self.counted_items -= 1;
            self.normalize_occupancy();
        }
        self.integrate_until(to);
    }

    fn integrate_until(&mut self, t: f64) {
        if t > self.clock {
            for w in &mut self.windows {
                w.integrate(self.clock, t, self.occupancy);
            }
            self.clock = t;
        }
    }

    fn normalize_occupancy(&mut self) {
        // Rounding drift would otherwise survive an empty cache.
        if self.counted_items == 0 {
            self.occupancy = 0.0;
        }
    }

    fn store(&mut self, item: usize, now: f64, hold: f64) {
        let size = self.catalog.sizes[item];
        let entry = &mut self.entries[item];
        entry.generation += 1;
        if entry.counted {
            self.occupancy -= entry.counted_size;
            entry.counted = false;
            self.counted_items -= 1;
        }
        entry.ever_cached = true;
        entry.cached_version = self.clocks[item].backend_version;
        entry.fetched_at = now;
        if hold > 0.0 {
            entry.counted = true;
            entry.counted_size = size;
            self.occupancy += size;
            self.counted_items += 1;
            if hold.is_finite() {
                self.expiries
                    .push(Reverse((Time(now + hold), item, entry.generation)));
            }
        }
    }

    fn charge(&mut self, t: f64, fetch: f64, aging: f64, request: bool, fetched: bool) {
        for w in &mut self.windows {
            if w.contains(t) {
                w.fetch_cost += fetch;
                w.aging_cost += aging;
                w.requests += request as u64;
                w.fetches += fetched as u64;
            }
        }
    }

    fn present(&self, item: usize) -> bool {
        self.entries[item].counted
    }

    fn handle_request(&mut self, policy: &mut dyn CachePolicy, t: f64, item: usize) -> Result<()> {
        self.advance_to(t);
        self.last_request[item] = t;
        let backend = self.clocks[item].advance(t, self.catalog.refresh_rates[item], &mut self.version_rngs[item])?;
        let entry = &self.entries[item];
        let age = if entry.ever_cached {
            backend - entry.cached_version
        } else {
            0
        };
        let ctx = RequestContext {
            item,
            now: t,
            size: self.catalog.sizes[item],
            age,
            ever_cached: entry.ever_cached,
            present: self.present(item),
            elapsed_since_fetch: entry.ever_cached.then_some(t - entry.fetched_at),
            occupancy: self.occupancy,
            costs: self.config.costs,
        };
        let decision = policy.on_request(&ctx)?;
        self.per_item_requests[item] += 1;
        let (fetched, charge) = match decision {
            Decision::Fetch { hold } => {
                if !(hold >= 0.0) {
                    return Err(Error::invalid(format!("policy returned holding time {hold}")));
                }
                self.store(item, t, hold);
                self.per_item_fetches[item] += 1;
                let c = self.catalog.sizes[item] * self.config.costs.fetch_unit_cost;
                self.charge(t, c, 0.0, true, true);
                (true, c)
            }
            Decision::Serve => {
                if !ctx.ever_cached {
                    return Err(Error::invalid(format!(
                        "policy '{}' served item {item} before it was ever fetched",
                        policy.name()
                    )));
                }
                let c = self.config.costs.aging_unit_cost * age as f64;
                self.charge(t, 0.0, c, true, false);
                (false, c)
            }
        };
        if self.record_events {
            self.events.push(EventRecord {
                time: t,
                item,
                kind: EventKind::Request,
                age,
                fetched,
                charge,
            });
        }
        let dt = next_interarrival(
            &mut self.arrival_rngs[item],
            self.config.demand.arrival_law,
            self.rates[item],
        )?;
        self.arrivals.push(Reverse((Time(t + dt), item)));
        Ok(())
    }

    fn handle_tick(&mut self, policy: &mut dyn CachePolicy, t: f64, step: f64) -> Result<()> {
        self.advance_to(t);
        for item in 0..self.catalog.n_items() {
            let entry = &self.entries[item];
            // Steps that saw a request were already decided at the request.
            if !entry.ever_cached || self.last_request[item] > t - step {
                continue;
            }
            let ctx = TickContext {
                item,
                now: t,
                size: self.catalog.sizes[item],
                elapsed_since_fetch: t - entry.fetched_at,
                costs: self.config.costs,
            };
            if policy.on_tick(&ctx)? {
                let backend = self.clocks[item].advance(t, self.catalog.refresh_rates[item], &mut self.version_rngs[item])?;
                let age = backend - self.entries[item].cached_version;
                self.store(item, t, f64::INFINITY);
                self.per_item_fetches[item] += 1;
                let c = self.catalog.sizes[item] * self.config.costs.fetch_unit_cost;
                self.charge(t, c, 0.0, false, true);
                if self.record_events {
                    self.events.push(EventRecord {
                        time: t,
                        item,
                        kind: EventKind::Tick,
                        age,
                        fetched: true,
                        charge: c,
                    });
                }
            }
        }
        Ok(())
    }

    fn handle_shift(&mut self, policy: &mut dyn CachePolicy, shift: &CatalogShift) -> Result<()> {
        let t = shift.at;
        self.advance_to(t);
        for i in 0..self.catalog.n_items() {
            self.clocks[i].advance(t, self.catalog.refresh_rates[i], &mut self.version_rngs[i])?;
        }
        self.catalog = shift.catalog.clone();
        self.rates = Self::request_rates(self.config, &self.catalog);
        self.schedule_all(t)?;
        policy.on_catalog_change(&self.catalog, t)
    }
}

/// Runs with default options.
pub fn simulate(config: &ScenarioConfig, policy: &mut dyn CachePolicy) -> Result<SimulationReport> {
    run(config, policy, &RunOptions::default())
}

pub fn run(
    config: &ScenarioConfig,
    policy: &mut dyn CachePolicy,
    options: &RunOptions,
) -> Result<SimulationReport> {
    ensure_valid(config)?;
    let n = config.catalog.n_items();
    let horizon = config.horizon_seconds;
    for (k, s) in options.shifts.iter().enumerate() {
        if s.catalog.n_items() != n {
            return Err(Error::config(format!(
                "shift {k} changes the catalog size from {n} to {}",
                s.catalog.n_items()
            )));
        }
        if !(s.at > 0.0 && s.at < horizon) {
            return Err(Error::config(format!("shift {k} at {} lies outside (0, horizon)", s.at)));
        }
        if k > 0 && s.at <= options.shifts[k - 1].at {
            return Err(Error::config("shifts must be sorted by time"));
        }
        let mut shifted = config.clone();
        shifted.catalog = s.catalog.clone();
        ensure_valid(&shifted)?;
    }
    if !(options.phase_burn_in >= 0.0) {
        return Err(Error::config("phase burn-in must be >= 0"));
    }

    let mut windows = vec![
        Window::new(0.0, horizon),
        Window::new(config.warmup_frac * horizon, horizon),
    ];
    let mut bounds = vec![0.0];
    bounds.extend(options.shifts.iter().map(|s| s.at));
    bounds.push(horizon);
    for w in bounds.windows(2) {
        windows.push(Window::new((w[0] + options.phase_burn_in).min(w[1]), w[1]));
    }

    let mut sim = Sim {
        config,
        catalog: config.catalog.clone(),
        rates: Sim::request_rates(config, &config.catalog),
        clocks: vec![VersionClock::starting_at(0.0); n],
        version_rngs: (0..n)
            .map(|i| RngStream::for_item(config.seed, i, StreamPurpose::Versions))
            .collect(),
        arrival_rngs: (0..n)
            .map(|i| RngStream::for_item(config.seed, i, StreamPurpose::Arrivals))
            .collect(),
        arrivals: BinaryHeap::new(),
        expiries: BinaryHeap::new(),
        entries: vec![Entry::default(); n],
        last_request: vec![f64::NEG_INFINITY; n],
        occupancy: 0.0,
        counted_items: 0,
        clock: 0.0,
        windows,
        per_item_requests: vec![0; n],
        per_item_fetches: vec![0; n],
        events: Vec::new(),
        record_events: options.record_events,
    };
    sim.schedule_all(0.0)?;

    let tick_step = policy.tick_interval();
    if let Some(step) = tick_step {
        if !(step > 0.0) {
            return Err(Error::invalid(format!("tick interval must be positive, got {step}")));
        }
    }
    let mut ticking = tick_step;
    let mut tick_index: u64 = 1;
    let mut next_shift = 0usize;
    let mut sample_index: u64 = 1;
    let mut samples = Vec::new();

    loop {
        let t_req = sim.arrivals.peek().map_or(f64::INFINITY, |r| (r.0).0 .0);
        let t_shift = options.shifts.get(next_shift).map_or(f64::INFINITY, |s| s.at);
        let t_sample = config
            .sample_interval
            .map_or(f64::INFINITY, |dt| sample_index as f64 * dt);
        let t_tick = match ticking {
            Some(step) => {
                let t = tick_index as f64 * step;
                // Once a learner is frozen and never fetches idle, ticks are
                // no-ops for the rest of the run.
                if policy.wants_ticks(t) {
                    t
                } else {
                    ticking = None;
                    f64::INFINITY
                }
            }
            None => f64::INFINITY,
        };
        let t = t_req.min(t_shift).min(t_sample).min(t_tick);
        if t > horizon || !t.is_finite() {
            break;
        }
        if t == t_shift {
            let shift = options.shifts[next_shift].clone();
            sim.handle_shift(policy, &shift)?;
            next_shift += 1;
        } else if t == t_sample {
            sim.advance_to(t);
            let total = sim.windows[0].fetch_cost + sim.windows[0].aging_cost;
            samples.push(Sample {
                time: t,
                running_avg_cost: total / t,
                occupancy: sim.occupancy,
            });
            sample_index += 1;
        } else if t == t_tick {
            sim.handle_tick(policy, t, tick_step.unwrap_or(0.0))?;
            tick_index += 1;
        } else {
            let Reverse((_, item)) = sim.arrivals.pop().expect("peeked");
            sim.handle_request(policy, t, item)?;
        }
    }
    sim.advance_to(horizon);

    let full = sim.windows[0].stats();
    let measured = sim.windows[1].stats();
    let phases = sim.windows[2..].iter().map(Window::stats).collect();
    Ok(SimulationReport {
        policy: policy.name().to_string(),
        seed: config.seed,
        config_hash: config_hash(config)?,
        duration: horizon,
        total_cost: full.total_cost,
        fetch_cost: full.fetch_cost,
        aging_cost: full.aging_cost,
        avg_cost_rate: full.cost_rate,
        occupancy_time_average: full.occupancy_average,
        request_count: full.requests,
        fetch_count: full.fetches,
        per_item_requests: sim.per_item_requests,
        per_item_fetches: sim.per_item_fetches,
        measured,
        phases,
        samples,
        events: sim.events,
    })
}

/// Mean and standard error over replications.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                n,
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Summary { n, mean, stderr }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Replications {
    pub reports: Vec<SimulationReport>,
    /// Over the measured (post-warm-up) cost rate.
    pub cost_rate: Summary,
    pub occupancy: Summary,
}

/// Independent runs with seeds `seed + k * seed_stride`, in parallel.
pub fn run_replications<F>(
    config: &ScenarioConfig,
    make_policy: F,
    n_runs: usize,
    seed_stride: u64,
) -> Result<Replications>
where
    F: Fn(&ScenarioConfig) -> Result<Box<dyn CachePolicy>> + Sync,
{
    if n_runs == 0 {
        return Err(Error::config("need at least one run"));
    }
    let reports = (0..n_runs as u64)
        .into_par_iter()
        .map(|k| {
            let mut cfg = config.clone();
            cfg.seed = config.seed.wrapping_add(k.wrapping_mul(seed_stride));
            let mut policy = make_policy(&cfg)?;
            simulate(&cfg, policy.as_mut())
        })
        .collect::<Result<Vec<_>>>()?;
    let rates: Vec<f64> = reports.iter().map(|r| r.measured.cost_rate).collect();
    let occ: Vec<f64> = reports.iter().map(|r| r.measured.occupancy_average).collect();
    Ok(Replications {
        cost_rate: Summary::of(&rates),
        occupancy: Summary::of(&occ),
        reports,
    })
}
