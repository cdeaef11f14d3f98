use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use freshcache::engine::{run, RunOptions, SimulationReport, Summary};
use freshcache::experiments::{
    optimal_report, parse_sweep_values, popularity_shift, replication_rows, run_sweep, ShiftKind,
    SweepParam, SweepSpec, TrainEval, OPTIMAL_ROW,
};
use freshcache::mdp_oracle::{
    default_cap, extract_threshold, threshold_trend, value_iteration, PerItemMdp,
};
use freshcache::metrics::{pct_increase_vs_optimal, to_csv, ExperimentResult};
use freshcache::qlearning::QTableSet;
use freshcache::{
    ensure_valid, load_config, optimal_cost_unlimited, Error, LoadedConfig, PolicyOptions,
    PolicyRegistry, Result, ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "freshcache", version, about = "Freshness-aware caching simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (flat `key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Independent runs; seeds are consecutive.
    #[arg(long, global = true, default_value_t = 1)]
    runs: usize,
    /// Overrides `sim.horizon` (seconds).
    #[arg(long, global = true)]
    duration: Option<f64>,
    /// Overrides `sim.warmup_frac`.
    #[arg(long, global = true)]
    warmup_frac: Option<f64>,
    /// Overrides `qlearning.train_horizon` (seconds).
    #[arg(long, global = true)]
    train_horizon: Option<f64>,
    /// CSV destination; a JSON summary is written next to it.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form optimal timers, multiplier, cost and occupancy.
    Optimal,
    /// Run one policy on the scenario.
    Simulate {
        #[arg(long, default_value = "swiftcache")]
        policy: String,
        /// Include each run's final policy state in the JSON summary.
        #[arg(long)]
        dump_state: bool,
        /// Start the Q-learner from saved tables (evaluation only).
        #[arg(long)]
        qtable_in: Option<PathBuf>,
        /// Save the Q-learner's tables after the first run.
        #[arg(long)]
        qtable_out: Option<PathBuf>,
        /// Write the first run's event log as CSV.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Train Q-tables for `qlearning.train_horizon` seconds and save them.
    TrainQ {
        #[arg(long)]
        qtable_out: PathBuf,
    },
    /// Sweep one parameter over several policies.
    Sweep {
        /// omega, budget or theta; defaults to `sweep.param`.
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values; defaults to `sweep.values`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated policy names.
        #[arg(long, value_delimiter = ',', default_value = "timer,swiftcache")]
        policy: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seed_stride: u64,
    },
    /// Discounted per-item MDP solved by value iteration.
    Oracle {
        #[arg(long)]
        fetch_cost: Option<f64>,
        #[arg(long)]
        aging_slope: Option<f64>,
        #[arg(long)]
        discount: Option<f64>,
        #[arg(long)]
        s_max: Option<usize>,
        /// Comma-separated discounts: report thresholds for one item of the
        /// scenario next to its closed-form timer.
        #[arg(long, value_delimiter = ',')]
        trend: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        item: usize,
    },
    /// Change the catalog mid-run and compare with a fresh start.
    Shift {
        #[arg(long, default_value = "swiftcache")]
        policy: String,
        /// reverse, reverse_refresh or rotate:K
        #[arg(long, default_value = "reverse")]
        kind: String,
        /// Shift time in seconds.
        #[arg(long)]
        at: f64,
        /// Excluded time after each phase start; defaults to 5/θ requests
        /// of the least requested item.
        #[arg(long)]
        burn_in: Option<f64>,
    },
    /// List the registered policies.
    Policies,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Configuration(_) | Error::InvalidArgument(_) | Error::InfeasibleBudget(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    let registry = PolicyRegistry::builtin();
    match &cli.command {
        Command::Optimal => cmd_optimal(c),
        Command::Simulate {
            policy,
            dump_state,
            qtable_in,
            qtable_out,
            events,
        } => cmd_simulate(
            c,
            &registry,
            policy,
            *dump_state,
            qtable_in.as_deref(),
            qtable_out.as_deref(),
            events.as_deref(),
        ),
        Command::TrainQ { qtable_out } => cmd_train_q(c, &registry, qtable_out),
        Command::Sweep {
            param,
            values,
            policy,
            seed_stride,
        } => cmd_sweep(c, &registry, param.as_deref(), values, policy, *seed_stride),
        Command::Oracle {
            fetch_cost,
            aging_slope,
            discount,
            s_max,
            trend,
            item,
        } => {
            if trend.is_empty() {
                cmd_oracle(c, *fetch_cost, *aging_slope, *discount, *s_max)
            } else {
                cmd_trend(c, trend, *item)
            }
        }
        Command::Shift {
            policy,
            kind,
            at,
            burn_in,
        } => cmd_shift(c, &registry, policy, kind, *at, *burn_in),
        Command::Policies => {
            let mut text = String::new();
            for (name, desc) in registry.describe() {
                text.push_str(&format!("{name:<12} {desc}\n"));
            }
            print_out(&text)
        }
    }
}

fn load(c: &Common) -> Result<LoadedConfig> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Error::Configuration("--config is required".into()))?;
    let mut loaded = load_config(path)?;
    let s = &mut loaded.scenario;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    if let Some(d) = c.duration {
        s.horizon_seconds = d;
    }
    if let Some(w) = c.warmup_frac {
        s.warmup_frac = w;
    }
    if let Some(t) = c.train_horizon {
        s.qlearning.train_horizon = t;
    }
    ensure_valid(s)?;
    Ok(loaded)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn print_out(text: &str) -> Result<()> {
    let mut out = io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

/// Prints the JSON summary; with `--output`, also writes the CSV there and
/// the summary next to it.
fn emit(c: &Common, csv: &str, summary: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    print_out(&format!("{text}\n"))?;
    if let Some(out) = &c.output {
        fs::write(out, csv)?;
        fs::write(out.with_extension("json"), text + "\n")?;
    }
    Ok(())
}

fn cmd_optimal(c: &Common) -> Result<()> {
    let cfg = load(c)?.scenario;
    let report = optimal_report(&cfg)?;
    let row = ExperimentResult {
        param: 0.0,
        policy: OPTIMAL_ROW.to_string(),
        seed: None,
        avg_cost_rate: report.policy.analytic_cost,
        occupancy: report.policy.analytic_occupancy,
        pct_vs_optimal: Some(pct_increase_vs_optimal(
            report.policy.analytic_cost,
            report.unlimited_cost,
        )?),
        pct_mf_vs_mb: None,
        stderr: None,
    };
    emit(c, &to_csv(&[row]), &serde_json::to_value(&report)?)
}

fn read_tables(path: &Path) -> Result<QTableSet> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
    QTableSet::from_json(&text)
}

fn write_tables(path: &Path, tables: Option<&QTableSet>) -> Result<()> {
    let tables = tables.ok_or_else(|| {
        Error::Configuration("--qtable-out needs the qlearning policy".into())
    })?;
    fs::write(path, tables.to_json()?)?;
    Ok(())
}

fn cmd_simulate(
    c: &Common,
    registry: &PolicyRegistry,
    policy: &str,
    dump_state: bool,
    qtable_in: Option<&Path>,
    qtable_out: Option<&Path>,
    events: Option<&Path>,
) -> Result<()> {
    if c.runs == 0 {
        return Err(Error::Configuration("--runs must be at least 1".into()));
    }
    let mut cfg = load(c)?.scenario;
    let mut options = PolicyOptions::default();
    if let Some(p) = qtable_in {
        options.qtables = Some(read_tables(p)?);
    } else if policy == "qlearning" {
        // Fresh tables: train first, then measure over the horizon.
        let te = TrainEval::from_config(&cfg);
        cfg = te.timeline(&cfg);
        options.train_until = Some(te.train);
    }
    let optimal = optimal_cost_unlimited(&cfg.catalog, cfg.demand.beta, &cfg.costs);

    let mut reports: Vec<SimulationReport> = Vec::with_capacity(c.runs);
    let mut states = Vec::new();
    for k in 0..c.runs as u64 {
        let mut run_cfg = cfg.clone();
        run_cfg.seed = cfg.seed.wrapping_add(k);
        let mut p = registry.build(policy, &run_cfg, &options)?;
        let opts = RunOptions {
            record_events: k == 0 && events.is_some(),
            ..Default::default()
        };
        let report = run(&run_cfg, p.as_mut(), &opts)?;
        if k == 0 {
            if let Some(path) = events {
                fs::write(path, report.events_csv())?;
            }
            if let Some(path) = qtable_out {
                write_tables(path, p.qtables())?;
            }
        }
        if dump_state {
            states.push(p.snapshot()?);
        }
        reports.push(report);
    }

    let (rows, cost_rate) = replication_rows(0.0, policy, &reports, optimal)?;
    let occupancy = Summary::of(
        &reports
            .iter()
            .map(|r| r.measured.occupancy_average)
            .collect::<Vec<_>>(),
    );
    let mut summary = json!({
        "policy": policy,
        "runs": c.runs,
        "optimal_cost": optimal,
        "cost_rate": cost_rate,
        "occupancy": occupancy,
        "reports": reports,
    });
    if dump_state {
        summary["state"] = Value::Array(states);
    }
    emit(c, &to_csv(&rows), &summary)
}

fn cmd_train_q(c: &Common, registry: &PolicyRegistry, qtable_out: &Path) -> Result<()> {
    let mut cfg = load(c)?.scenario;
    cfg.horizon_seconds = c.duration.unwrap_or(cfg.qlearning.train_horizon);
    ensure_valid(&cfg)?;
    let options = PolicyOptions {
        train_until: Some(cfg.horizon_seconds),
        ..Default::default()
    };
    let mut p = registry.build("qlearning", &cfg, &options)?;
    let report = run(&cfg, p.as_mut(), &RunOptions::default())?;
    write_tables(qtable_out, p.qtables())?;
    let optimal = optimal_cost_unlimited(&cfg.catalog, cfg.demand.beta, &cfg.costs);
    let (rows, _) = replication_rows(0.0, "qlearning", std::slice::from_ref(&report), optimal)?;
    let summary = json!({
        "qtable": qtable_out.display().to_string(),
        "report": report,
    });
    emit(c, &to_csv(&rows), &summary)
}

fn cmd_sweep(
    c: &Common,
    registry: &PolicyRegistry,
    param: Option<&str>,
    values: &[String],
    policies: &[String],
    seed_stride: u64,
) -> Result<()> {
    let loaded = load(c)?;
    let param: SweepParam = param
        .or(loaded.sweep.param.as_deref())
        .ok_or_else(|| Error::Configuration("missing --param (or key 'sweep.param')".into()))?
        .parse()?;
    let values = if values.is_empty() {
        loaded
            .sweep
            .values
            .clone()
            .ok_or_else(|| Error::Configuration("missing --values (or key 'sweep.values')".into()))?
    } else {
        values.to_vec()
    };
    let spec = SweepSpec {
        param,
        values: parse_sweep_values(&values)?,
        policies: policies.to_vec(),
        runs: c.runs,
        seed_stride,
    };
    // Unknown names fail before any simulation starts.
    for name in &spec.policies {
        registry.build(name, &loaded.scenario, &PolicyOptions::default())?;
    }
    let rows = run_sweep(&loaded.scenario, &spec, registry)?;
    let summary = json!({
        "param": param,
        "values": spec.values,
        "policies": spec.policies,
        "runs": spec.runs,
        "rows": rows,
    });
    emit(c, &to_csv(&rows), &summary)
}

fn cmd_oracle(
    c: &Common,
    fetch_cost: Option<f64>,
    aging_slope: Option<f64>,
    discount: Option<f64>,
    s_max: Option<usize>,
) -> Result<()> {
    let need = |v: Option<f64>, flag: &str| {
        v.ok_or_else(|| Error::Configuration(format!("oracle needs --{flag} (or --trend)")))
    };
    let f = need(fetch_cost, "fetch-cost")?;
    let kappa = need(aging_slope, "aging-slope")?;
    let q = need(discount, "discount")?;
    let s_max = s_max.unwrap_or_else(|| default_cap(f, kappa));
    let mdp = PerItemMdp::new(s_max, f, kappa, q)?;
    let max_iter = ((1e-12f64.ln() / q.ln()).ceil() as usize).max(100) * 4;
    let solved = value_iteration(&mdp, 1e-10, max_iter)?;
    let threshold = extract_threshold(&solved.policy);

    let mut csv = String::from("state,value,action\n");
    for (i, (v, a)) in solved.values.iter().zip(&solved.policy).enumerate() {
        csv.push_str(&format!("{},{},{:?}\n", i + 1, v, a).to_lowercase());
    }
    let summary = json!({
        "fetch_cost": f,
        "aging_slope": kappa,
        "discount": q,
        "s_max": s_max,
        "iterations": solved.iterations,
        "threshold": threshold,
        "values": solved.values,
        "policy": solved.policy,
    });
    emit(c, &csv, &summary)
}

fn cmd_trend(c: &Common, discounts: &[f64], item: usize) -> Result<()> {
    let cfg = load(c)?.scenario;
    if item >= cfg.catalog.n_items() {
        return Err(Error::Configuration(format!(
            "--item {item} is outside the catalog of {} items",
            cfg.catalog.n_items()
        )));
    }
    let points = threshold_trend(
        cfg.catalog.sizes[item],
        cfg.item_rate(item),
        cfg.catalog.refresh_rates[item],
        &cfg.costs,
        discounts,
    )?;
    let mut csv = String::from("discount,threshold_steps,threshold_seconds,closed_form_timer\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            p.discount, p.threshold_steps, p.threshold_seconds, p.closed_form_timer
        ));
    }
    emit(c, &csv, &json!({ "item": item, "trend": points }))
}

fn default_burn_in(cfg: &ScenarioConfig) -> f64 {
    let slowest = (0..cfg.catalog.n_items())
        .map(|i| cfg.item_rate(i))
        .fold(f64::INFINITY, f64::min);
    5.0 / cfg.swiftcache.theta / slowest
}

fn cmd_shift(
    c: &Common,
    registry: &PolicyRegistry,
    policy: &str,
    kind: &str,
    at: f64,
    burn_in: Option<f64>,
) -> Result<()> {
    let cfg = load(c)?.scenario;
    let kind: ShiftKind = kind.parse()?;
    let burn_in = burn_in.unwrap_or_else(|| default_burn_in(&cfg));
    let outcome = popularity_shift(&cfg, &kind, at, burn_in, policy, c.runs, registry)?;
    let mut csv = String::from("seed,shifted_rate,fresh_rate,relative_gap\n");
    for r in &outcome.runs {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.seed, r.shifted_rate, r.fresh_rate, r.relative_gap
        ));
    }
    emit(c, &csv, &serde_json::to_value(&outcome)?)
}
