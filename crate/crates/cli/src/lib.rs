//! `aop` command line: loads a config, runs one experiment and writes CSV
//! tables plus a `manifest.json` into the output directory.

pub mod experiments;
pub mod output;

use std::path::PathBuf;

use aop_core::aop_model::{load_config, parse_override, ConfigError, ProcessingOrigin};
use aop_core::cmdp_lagrangian::{
    mixture_metrics, robbins_monro, write_lambda_trace, CmdpError, CmdpSolution, LambdaTrace,
    StepRule,
};
use aop_core::mdp_solver::{
    threshold_violations, write_policy_table, write_threshold_report, MdpSolver, SolverError,
    StationaryDeterministicPolicy,
};
use aop_core::simulator::{
    age_breakpoints, ratio_report, simulate, write_breakpoints, write_prefix_series,
    write_summaries, PolicyKind, SimulationError,
};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use experiments::{
    bench_rows, run_policies, run_sweep, PolicyChoice, RunSettings, Scenario, StepChoice, SweepKind,
};
use output::{Manifest, OutputDir};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Cmdp(#[from] CmdpError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
}

impl CliError {
    /// 1 usage, config or io; 2 solver; 3 simulation.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Cmdp(CmdpError::Io(_)) | CliError::Simulation(SimulationError::Io(_)) => 1,
            CliError::Solver(_) | CliError::Cmdp(_) => 2,
            CliError::Simulation(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "aop",
    version,
    about = "Age-of-processing CMDP solver and simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; the bundled default scenario when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_name = "U64", default_value_t = 1)]
    pub seed: u64,
    #[arg(long = "n-updates", global = true, value_name = "COUNT", default_value_t = 100_000,
          value_parser = clap::value_parser!(u64).range(1..))]
    pub n_updates: u64,
    /// Repeat to trace several rules; the first one drives the solve.
    #[arg(long = "step-rule", global = true, value_enum)]
    pub step_rule: Vec<StepChoice>,
    /// Config override, e.g. `t_min=1000` or `channel.states.1.tx_time=700`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Sweep threads; all cores when omitted.
    #[arg(long, global = true, value_name = "COUNT", value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiplier search, bracketing and mixture; writes traces, both policies and mixture.json.
    Solve,
    /// Simulates policies and writes simulate.csv.
    Simulate {
        #[arg(long, value_enum, value_delimiter = ',')]
        policy: Vec<PolicyChoice>,
        /// Also write the age sawtooth corners per policy.
        #[arg(long)]
        breakpoints: bool,
    },
    /// Multiplier traces only.
    LambdaTrace,
    /// Prefix series of the simulated-to-relaxed AoP ratio for the optimal mixture.
    RatioCheck,
    /// Policy tables at the multiplier and both perturbations, their diff and the threshold report.
    PolicyDump,
    /// Medium channel transmission time sweep.
    SweepTx {
        /// Medium tx times in ms.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Computation demand sweep.
    SweepCycles {
        /// Demands in Gigacycles.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Optimal mixture against the three benchmarks.
    Bench,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate { .. } => "simulate",
            Command::LambdaTrace => "lambda-trace",
            Command::RatioCheck => "ratio-check",
            Command::PolicyDump => "policy-dump",
            Command::SweepTx { .. } => "sweep-tx",
            Command::SweepCycles { .. } => "sweep-cycles",
            Command::Bench => "bench",
        }
    }
}

struct Context {
    scenario: Scenario,
    rules: Vec<StepChoice>,
    seed: u64,
    n: usize,
    workers: Option<usize>,
    out: OutputDir,
    effective_config: String,
    overrides: Vec<(String, String)>,
}

impl Context {
    fn primary_rule(&self) -> StepRule {
        self.scenario.step_rule(self.rules[0])
    }

    fn finish(self, command: &str, results: serde_json::Value) -> Result<(), CliError> {
        let manifest = Manifest {
            command: command.to_string(),
            seed: self.seed,
            effective_config: self.effective_config,
            overrides: self.overrides,
            results,
        };
        self.out.finish(manifest)?;
        Ok(())
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let c = &cli.common;
    let overrides = c
        .set
        .iter()
        .map(|raw| parse_override(raw))
        .collect::<Result<Vec<_>, _>>()?;
    let (file, table) = load_config(c.config.as_deref(), &overrides)?;
    let effective_config = toml::to_string(&table).map_err(|e| CliError::Io(e.to_string()))?;
    let scenario = Scenario::new(file)?;
    let rules = if c.step_rule.is_empty() {
        vec![StepChoice::Scaled]
    } else {
        c.step_rule.clone()
    };
    let mut ctx = Context {
        scenario,
        rules,
        seed: c.seed,
        n: usize::try_from(c.n_updates).map_err(|e| CliError::Usage(e.to_string()))?,
        workers: c.workers.map(|w| w as usize),
        out: OutputDir::create(&c.out)?,
        effective_config,
        overrides,
    };
    ctx.out
        .write("config.toml", ctx.effective_config.clone().as_bytes())?;

    let name = cli.command.name();
    let results = match &cli.command {
        Command::Solve => solve(&mut ctx)?,
        Command::Simulate {
            policy,
            breakpoints,
        } => simulate_cmd(&mut ctx, policy, *breakpoints)?,
        Command::LambdaTrace => lambda_trace(&mut ctx)?,
        Command::RatioCheck => ratio_check(&mut ctx)?,
        Command::PolicyDump => policy_dump(&mut ctx)?,
        Command::SweepTx { values } => sweep(&mut ctx, SweepKind::Tx, values)?,
        Command::SweepCycles { values } => sweep(&mut ctx, SweepKind::Cycles, values)?,
        Command::Bench => bench(&mut ctx)?,
    };
    ctx.finish(name, results)
}

fn trace_file(rule: StepChoice) -> String {
    format!("lambda_trace_{}.csv", rule_name(rule))
}

fn rule_name(rule: StepChoice) -> &'static str {
    match rule {
        StepChoice::Harmonic => "harmonic",
        StepChoice::Scaled => "scaled",
    }
}

/// Writes one trace file per requested rule, plus `lambda_trace.csv` for
/// the first. `primary` is reused instead of re-running the first rule.
fn write_traces(
    ctx: &mut Context,
    primary: Option<&LambdaTrace>,
) -> Result<Vec<serde_json::Value>, CliError> {
    let model = &ctx.scenario.model;
    let cfg = model.config();
    let mut solver = MdpSolver::new(model);
    let mut info = Vec::new();
    for (i, &choice) in ctx.rules.clone().iter().enumerate() {
        let rule = ctx.scenario.step_rule(choice);
        let owned;
        let trace = match (i, primary) {
            (0, Some(t)) => t,
            _ => {
                owned = robbins_monro(&mut solver, rule, 0.0, cfg.stop_tol, cfg.max_outer_iters)?;
                &owned
            }
        };
        let file = trace_file(choice);
        ctx.out
            .write_with(&file, |buf| write_lambda_trace(buf, trace))?;
        if i == 0 {
            ctx.out
                .write_with("lambda_trace.csv", |buf| write_lambda_trace(buf, trace))?;
        }
        info.push(json!({
            "rule": rule.to_string(),
            "file": file,
            "iterations": trace.iterations(),
            "converged": trace.converged,
            "final_lambda": trace.final_lambda,
        }));
    }
    Ok(info)
}

fn solve(ctx: &mut Context) -> Result<serde_json::Value, CliError> {
    let solution = ctx.scenario.solve(ctx.primary_rule())?;
    let traces = write_traces(ctx, Some(&solution.trace))?;
    let model = &ctx.scenario.model;
    let r = &solution.refinement;
    ctx.out.write_with("policy_high.csv", |buf| {
        write_policy_table(buf, &r.mixture.high, model)
    })?;
    ctx.out.write_with("policy_low.csv", |buf| {
        write_policy_table(buf, &r.mixture.low, model)
    })?;
    let per_epoch = mixture_metrics(&r.mixture, model, solution.lambda_star)?;
    let summary = json!({
        "t_min_ms": model.t_min(),
        "q": r.mixture.q,
        "lambda_star": solution.lambda_star,
        "lambda_high": r.multipliers.high,
        "lambda_low": r.multipliers.low,
        "lambda_low_clamped": r.multipliers.clamped,
        "avg_cycle_high_ms": r.avg_cycle_high,
        "avg_cycle_low_ms": r.avg_cycle_low,
        "mixed_avg_cycle_ms": r.mixed_avg_cycle(),
        "degenerate": r.degenerate,
        "differing_states": r.differing_states,
        "policy_high": "policy_high.csv",
        "policy_low": "policy_low.csv",
        "per_decision_coin": {
            "avg_cycle_ms": per_epoch.avg_cycle,
            "avg_relaxed_aop_ms": per_epoch.avg_relaxed_aop,
            "avg_aop_ratio_of_sums_ms": per_epoch.avg_aop_ratio_of_sums,
        },
        "traces": traces,
    });
    ctx.out.write_json("mixture.json", &summary)?;
    Ok(summary)
}

fn simulate_cmd(
    ctx: &mut Context,
    policies: &[PolicyChoice],
    breakpoints: bool,
) -> Result<serde_json::Value, CliError> {
    let policies = if policies.is_empty() {
        PolicyChoice::ALL.to_vec()
    } else {
        policies.to_vec()
    };
    let solution = if policies.contains(&PolicyChoice::Optimal) {
        Some(ctx.scenario.solve(ctx.primary_rule())?)
    } else {
        None
    };
    let mixture = solution.as_ref().map(|s| &s.refinement.mixture);
    let model = &ctx.scenario.model;
    let mut summaries = Vec::new();
    for choice in policies {
        let kind = choice.kind(mixture).expect("solved above");
        let t = simulate(&kind, ctx.n, ctx.seed, model)?;
        if breakpoints {
            let name = format!("breakpoints_{}.csv", kind.label().to_lowercase());
            let points = age_breakpoints(&t.records);
            ctx.out
                .write_with(&name, |buf| write_breakpoints(buf, &points))?;
        }
        summaries.push((kind.label().to_string(), t.summary));
    }
    let rows: Vec<(&str, _)> = summaries.iter().map(|(l, s)| (l.as_str(), *s)).collect();
    ctx.out
        .write_with("simulate.csv", |buf| write_summaries(buf, &rows))?;
    Ok(json!({ "policies": summaries.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>() }))
}

fn lambda_trace(ctx: &mut Context) -> Result<serde_json::Value, CliError> {
    let traces = write_traces(ctx, None)?;
    Ok(json!({ "traces": traces }))
}

fn ratio_check(ctx: &mut Context) -> Result<serde_json::Value, CliError> {
    let solution = ctx.scenario.solve(ctx.primary_rule())?;
    let kind = PolicyKind::Mixture(solution.refinement.mixture.clone());
    let t = simulate(&kind, ctx.n, ctx.seed, &ctx.scenario.model)?;
    let points = ratio_report(&t);
    ctx.out
        .write_with("ratio.csv", |buf| write_prefix_series(buf, &points))?;
    let last = points.last().expect("n >= 1");
    Ok(
        json!({ "n": last.n_prefix, "q_bar_ms": last.q_bar, "q_tilde_ms": last.q_tilde, "ratio": last.ratio }),
    )
}

#[derive(Debug, Serialize)]
struct DiffRow {
    state: usize,
    prev_age_ms: f64,
    prev_wait_ms: f64,
    cur_origin: ProcessingOrigin,
    channel: usize,
    cur_age_ms: f64,
    star_wait_ms: f64,
    star_origin: ProcessingOrigin,
    high_wait_ms: f64,
    high_origin: ProcessingOrigin,
    low_wait_ms: f64,
    low_origin: ProcessingOrigin,
}

fn diff_rows(solution: &CmdpSolution, ctx: &Context) -> Vec<DiffRow> {
    let model = &ctx.scenario.model;
    let star = &solution.policy_star;
    let high = &solution.refinement.mixture.high;
    let low = &solution.refinement.mixture.low;
    let mut states: Vec<usize> = star.differing_states(high);
    states.extend(star.differing_states(low));
    states.extend(high.differing_states(low));
    states.sort_unstable();
    states.dedup();
    let pick = |p: &StationaryDeterministicPolicy, i| {
        let a = p.action(i);
        (model.wait(a.wait_index), a.next_origin)
    };
    states
        .into_iter()
        .map(|i| {
            let s = model.space().state(i);
            let (star_wait_ms, star_origin) = pick(star, i);
            let (high_wait_ms, high_origin) = pick(high, i);
            let (low_wait_ms, low_origin) = pick(low, i);
            DiffRow {
                state: i,
                prev_age_ms: model.prev_age(&s),
                prev_wait_ms: model.wait(s.prev_wait_index),
                cur_origin: s.cur_origin,
                channel: s.channel_index,
                cur_age_ms: model.cur_age(&s),
                star_wait_ms,
                star_origin,
                high_wait_ms,
                high_origin,
                low_wait_ms,
                low_origin,
            }
        })
        .collect()
}

fn policy_dump(ctx: &mut Context) -> Result<serde_json::Value, CliError> {
    let solution = ctx.scenario.solve(ctx.primary_rule())?;
    let diff = diff_rows(&solution, ctx);
    let model = &ctx.scenario.model;
    let r = &solution.refinement;
    ctx.out.write_with("policy_star.csv", |buf| {
        write_policy_table(buf, &solution.policy_star, model)
    })?;
    ctx.out.write_with("policy_high.csv", |buf| {
        write_policy_table(buf, &r.mixture.high, model)
    })?;
    ctx.out.write_with("policy_low.csv", |buf| {
        write_policy_table(buf, &r.mixture.low, model)
    })?;
    ctx.out.write_rows("policy_diff.csv", &diff)?;
    ctx.out.write_with("threshold.csv", |buf| {
        write_threshold_report(buf, &solution.policy_star, model)
    })?;
    Ok(json!({
        "lambda_star": solution.lambda_star,
        "star_equals_high": solution.policy_star == r.mixture.high,
        "high_low_differing_states": r.differing_states,
        "threshold_violations": threshold_violations(&solution.policy_star, model),
    }))
}

fn sweep(
    ctx: &mut Context,
    kind: SweepKind,
    values: &[f64],
) -> Result<serde_json::Value, CliError> {
    let values = if values.is_empty() {
        kind.default_values()
    } else {
        values.to_vec()
    };
    if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(CliError::Usage(format!(
            "sweep values must be positive, got {bad}"
        )));
    }
    let point_dir = ctx.out.root().join(kind.name());
    let points = run_sweep(
        kind,
        &ctx.scenario,
        &values,
        RunSettings {
            rule: ctx.rules[0],
            n: ctx.n,
            seed: ctx.seed,
        },
        ctx.workers,
        Some(&point_dir),
    )?;
    let file = format!("{}.csv", kind.name());
    ctx.out
        .write_with(&file, |buf| experiments::write_sweep(buf, kind, &points))?;
    Ok(json!({
        "values": values,
        "point_files": (0..values.len()).map(|i| format!("{}/point_{i:03}.csv", kind.name())).collect::<Vec<_>>(),
    }))
}

fn bench(ctx: &mut Context) -> Result<serde_json::Value, CliError> {
    let solution = ctx.scenario.solve(ctx.primary_rule())?;
    let summaries = run_policies(
        &ctx.scenario.model,
        Some(&solution.refinement.mixture),
        &PolicyChoice::ALL,
        ctx.n,
        ctx.seed,
    )?;
    let rows = bench_rows(&summaries);
    ctx.out.write_rows("bench.csv", &rows)?;
    Ok(json!({
        "lambda_star": solution.lambda_star,
        "q": solution.refinement.mixture.q,
        "avg_aop_ms": rows.iter().map(|r| (r.policy.clone(), json!(r.avg_aop_ms))).collect::<serde_json::Map<_, _>>(),
    }))
}
