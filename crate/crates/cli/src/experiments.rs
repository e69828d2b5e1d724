use std::path::Path;

use aop_core::aop_model::{AopModel, ConfigError, ConfigFile};
use aop_core::cmdp_lagrangian::{
    solve_cmdp, CmdpError, CmdpOptions, CmdpSolution, MixturePolicy, StepRule,
};
use aop_core::mdp_solver::MdpSolver;
use aop_core::simulator::{simulate, Benchmark, PolicyKind, SimulationError, TrajectorySummary};
use rayon::prelude::*;
use serde::Serialize;

use crate::output::{write_atomic, write_rows};
use crate::CliError;

/// A config in file units together with the model built from it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub file: ConfigFile,
    pub model: AopModel,
}

impl Scenario {
    pub fn new(file: ConfigFile) -> Result<Self, ConfigError> {
        let (system, channel) = file.to_model_inputs()?;
        let model = AopModel::new(system, channel)?;
        Ok(Self { file, model })
    }

    pub fn default_scenario() -> Self {
        Self::new(ConfigFile::default_scenario()).expect("bundled config is valid")
    }

    /// Medium channel state at `medium` ms, good at half and bad at twice
    /// that. Needs exactly three channel states.
    pub fn with_medium_tx(&self, medium: f64) -> Result<Self, ConfigError> {
        let mut file = self.file.clone();
        let states = &mut file.channel.states;
        if states.len() != 3 {
            return Err(ConfigError::Invalid {
                field: "channel.states",
                reason: format!(
                    "tx sweep needs good/medium/bad states, found {}",
                    states.len()
                ),
            });
        }
        for (state, factor) in states.iter_mut().zip([0.5, 1.0, 2.0]) {
            state.tx_time = medium * factor;
        }
        Self::new(file)
    }

    /// Computation demand of one update in Gigacycles.
    pub fn with_gigacycles(&self, gigacycles: f64) -> Result<Self, ConfigError> {
        let mut file = self.file.clone();
        file.cycles = gigacycles * 1000.0;
        Self::new(file)
    }

    /// `scaled` maps to the configured step factor.
    pub fn step_rule(&self, choice: StepChoice) -> StepRule {
        match choice {
            StepChoice::Harmonic => StepRule::Harmonic,
            StepChoice::Scaled => StepRule::Scaled(self.file.step_factor),
        }
    }

    pub fn solve(&self, rule: StepRule) -> Result<CmdpSolution, CmdpError> {
        let mut solver = MdpSolver::new(&self.model);
        let options = CmdpOptions {
            step_rule: rule,
            ..CmdpOptions::from_model(&self.model)
        };
        solve_cmdp(&mut solver, &options)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum StepChoice {
    Harmonic,
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyChoice {
    Optimal,
    Aezw,
    Aecw,
    Alcw,
}

impl PolicyChoice {
    pub const ALL: [PolicyChoice; 4] = [
        PolicyChoice::Optimal,
        PolicyChoice::Aezw,
        PolicyChoice::Aecw,
        PolicyChoice::Alcw,
    ];

    pub fn kind(self, mixture: Option<&MixturePolicy>) -> Option<PolicyKind> {
        Some(match self {
            PolicyChoice::Optimal => PolicyKind::Mixture(mixture?.clone()),
            PolicyChoice::Aezw => PolicyKind::Benchmark(Benchmark::Aezw),
            PolicyChoice::Aecw => PolicyKind::Benchmark(Benchmark::Aecw),
            PolicyChoice::Alcw => PolicyKind::Benchmark(Benchmark::Alcw),
        })
    }
}

/// Simulates each policy for `n` updates from the same seed. The optimal
/// policy is the per-decision coin mixture.
pub fn run_policies(
    model: &AopModel,
    mixture: Option<&MixturePolicy>,
    choices: &[PolicyChoice],
    n: usize,
    seed: u64,
) -> Result<Vec<(String, TrajectorySummary)>, SimulationError> {
    choices
        .iter()
        .map(|c| {
            let kind = c
                .kind(mixture)
                .expect("mixture supplied when optimal is requested");
            let t = simulate(&kind, n, seed, model)?;
            Ok((kind.label().to_string(), t.summary))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: String,
    pub n: usize,
    pub seed: u64,
    pub avg_aop_ms: f64,
    pub avg_aop_mean_of_ratios_ms: f64,
    pub avg_cycle_ms: f64,
    /// `(policy - optimal) / policy` in percent.
    pub optimal_reduction_pct: f64,
}

pub fn bench_rows(summaries: &[(String, TrajectorySummary)]) -> Vec<BenchRow> {
    let optimal = summaries
        .iter()
        .find(|(label, _)| label == "optimal")
        .map(|(_, s)| s.avg_aop_ratio_of_sums);
    summaries
        .iter()
        .map(|(label, s)| BenchRow {
            policy: label.clone(),
            n: s.n,
            seed: s.seed,
            avg_aop_ms: s.avg_aop_ratio_of_sums,
            avg_aop_mean_of_ratios_ms: s.avg_aop_mean_of_ratios,
            avg_cycle_ms: s.avg_cycle,
            optimal_reduction_pct: optimal
                .map(|o| 100.0 * (s.avg_aop_ratio_of_sums - o) / s.avg_aop_ratio_of_sums)
                .unwrap_or(f64::NAN),
        })
        .collect()
}

/// Step rule of the solve and length and seed of each simulation.
#[derive(Debug, Clone, Copy)]
pub struct RunSettings {
    pub rule: StepChoice,
    pub n: usize,
    pub seed: u64,
}

/// Solve and simulate at one sweep value.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub value: f64,
    pub lambda_star: f64,
    pub q: f64,
    pub summaries: Vec<(String, TrajectorySummary)>,
}

impl SweepPoint {
    pub fn summary(&self, label: &str) -> Option<&TrajectorySummary> {
        self.summaries
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    /// Medium channel transmission time, ms.
    Tx,
    /// Computation demand, Gigacycles.
    Cycles,
}

impl SweepKind {
    pub fn name(self) -> &'static str {
        match self {
            SweepKind::Tx => "sweep_tx",
            SweepKind::Cycles => "sweep_cycles",
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            SweepKind::Tx => "medium_tx_ms",
            SweepKind::Cycles => "cycles_gigacycles",
        }
    }

    /// 600..=1100 ms by 100, or 1.0..=2.0 Gigacycles by 0.2.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepKind::Tx => (6..=11).map(|k| 100.0 * k as f64).collect(),
            SweepKind::Cycles => (0..=5).map(|k| (10 + 2 * k) as f64 / 10.0).collect(),
        }
    }

    pub fn scenario(self, base: &Scenario, value: f64) -> Result<Scenario, ConfigError> {
        match self {
            SweepKind::Tx => base.with_medium_tx(value),
            SweepKind::Cycles => base.with_gigacycles(value),
        }
    }
}

/// Re-solves and simulates all four policies at `value`.
pub fn sweep_point(
    kind: SweepKind,
    base: &Scenario,
    value: f64,
    run: RunSettings,
) -> Result<SweepPoint, CliError> {
    let scenario = kind.scenario(base, value)?;
    let solution = scenario.solve(scenario.step_rule(run.rule))?;
    let mixture = &solution.refinement.mixture;
    let summaries = run_policies(
        &scenario.model,
        Some(mixture),
        &PolicyChoice::ALL,
        run.n,
        run.seed,
    )?;
    Ok(SweepPoint {
        value,
        lambda_star: solution.lambda_star,
        q: mixture.q,
        summaries,
    })
}

/// Runs every point on a pool of `workers` threads. With `point_dir`, each
/// point's rows are also written atomically to `<point_dir>/point_<i>.csv`.
/// Results come back in grid order.
pub fn run_sweep(
    kind: SweepKind,
    base: &Scenario,
    values: &[f64],
    run: RunSettings,
    workers: Option<usize>,
    point_dir: Option<&Path>,
) -> Result<Vec<SweepPoint>, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| {
        values
            .par_iter()
            .enumerate()
            .map(|(i, &value)| {
                let point = sweep_point(kind, base, value, run)?;
                if let Some(dir) = point_dir {
                    let mut buf = Vec::new();
                    write_sweep(&mut buf, kind, std::slice::from_ref(&point))?;
                    write_atomic(&dir.join(format!("point_{i:03}.csv")), &buf)?;
                }
                Ok(point)
            })
            .collect()
    })
}

#[derive(Debug, Serialize)]
struct SweepRow<'a> {
    value: f64,
    policy: &'a str,
    avg_aop_ms: f64,
    avg_aop_mean_of_ratios_ms: f64,
    avg_cycle_ms: f64,
    lambda_star: f64,
    q: f64,
}

/// One row per (value, policy), header
/// `<column>,policy,avg_aop_ms,avg_aop_mean_of_ratios_ms,avg_cycle_ms,lambda_star,q`.
pub fn write_sweep(
    buf: &mut Vec<u8>,
    kind: SweepKind,
    points: &[SweepPoint],
) -> Result<(), CliError> {
    let rows: Vec<SweepRow> = points
        .iter()
        .flat_map(|p| {
            p.summaries.iter().map(move |(label, s)| SweepRow {
                value: p.value,
                policy: label,
                avg_aop_ms: s.avg_aop_ratio_of_sums,
                avg_aop_mean_of_ratios_ms: s.avg_aop_mean_of_ratios,
                avg_cycle_ms: s.avg_cycle,
                lambda_star: p.lambda_star,
                q: p.q,
            })
        })
        .collect();
    let mut body = Vec::new();
    write_rows(&mut body, &rows)?;
    // the value column is named after the swept parameter
    let text = String::from_utf8(body).map_err(|e| CliError::Io(e.to_string()))?;
    let text = text.replacen("value,", &format!("{},", kind.column()), 1);
    buf.extend_from_slice(text.as_bytes());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tx_variant_scales_good_and_bad() {
        let s = Scenario::default_scenario().with_medium_tx(700.0).unwrap();
        let tx: Vec<f64> = s
            .model
            .channel()
            .states()
            .iter()
            .map(|c| c.tx_time)
            .collect();
        assert_eq!(tx, vec![350.0, 700.0, 1400.0]);
    }

    #[test]
    fn cycle_variant_changes_local_time() {
        let s = Scenario::default_scenario().with_gigacycles(2.0).unwrap();
        assert!((s.model.local_time() - 2000.0).abs() < 1e-9);
        assert!((s.model.edge_exec_time() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn default_grids() {
        assert_eq!(
            SweepKind::Tx.default_values(),
            vec![600.0, 700.0, 800.0, 900.0, 1000.0, 1100.0]
        );
        assert_eq!(
            SweepKind::Cycles.default_values(),
            vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0]
        );
    }

    #[test]
    fn reduction_is_relative_to_each_benchmark() {
        let summary = |aop| TrajectorySummary {
            n: 10,
            seed: 1,
            avg_aop_ratio_of_sums: aop,
            avg_aop_mean_of_ratios: aop,
            avg_cycle: 1200.0,
        };
        let rows = bench_rows(&[
            ("optimal".into(), summary(1500.0)),
            ("AEZW".into(), summary(2000.0)),
        ]);
        assert_eq!(rows[0].optimal_reduction_pct, 0.0);
        assert_eq!(rows[1].optimal_reduction_pct, 25.0);
    }
}
