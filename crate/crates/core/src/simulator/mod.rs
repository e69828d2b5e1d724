//! Seeded trajectories of the update loop under solved, mixed or benchmark
//! policies.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64`. Every epoch
//! draws one uniform for the mixture coin (drawn even when unused, so all
//! policy kinds consume the stream identically) and then one for the channel
//! move.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aop_model::{raw_area, relaxed_area, Action, AopModel, AopState, ProcessingOrigin};
use crate::cmdp_lagrangian::MixturePolicy;
use crate::mdp_solver::StationaryDeterministicPolicy;

#[derive(Debug, thiserror::Error)]
pub enum SimulationError {
    #[error("trajectory length must be at least 1")]
    EmptyTrajectory,
    #[error("policy covers {got} states, model has {expected}")]
    PolicyShape { expected: usize, got: usize },
    #[error("state {0:?} is not in the model's state space")]
    UnknownState(AopState),
    #[error("output: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Benchmark {
    /// Always offload, never wait.
    Aezw,
    /// Always offload, wait `max(T_min - Y, 0)`.
    Aecw,
    /// Always process locally, wait `T_min - t_l`.
    Alcw,
}

impl Benchmark {
    pub const ALL: [Benchmark; 3] = [Benchmark::Aezw, Benchmark::Aecw, Benchmark::Alcw];

    pub fn label(self) -> &'static str {
        match self {
            Benchmark::Aezw => "AEZW",
            Benchmark::Aecw => "AECW",
            Benchmark::Alcw => "ALCW",
        }
    }
}

#[derive(Debug, Clone)]
pub enum PolicyKind {
    Solved(StationaryDeterministicPolicy),
    Mixture(MixturePolicy),
    Benchmark(Benchmark),
}

impl PolicyKind {
    pub fn label(&self) -> &'static str {
        match self {
            PolicyKind::Solved(_) => "solved",
            PolicyKind::Mixture(_) => "optimal",
            PolicyKind::Benchmark(b) => b.label(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkDecision {
    pub wait: f64,
    pub origin: ProcessingOrigin,
    /// ALCW would need a negative wait because `t_l > T_min`.
    pub clamped: bool,
}

/// Wait and next processing site of a benchmark given the age `current_age`
/// of the update just delivered. Waits are not restricted to the grid.
pub fn benchmark_decision(
    kind: Benchmark,
    current_age: f64,
    model: &AopModel,
) -> BenchmarkDecision {
    let t_min = model.t_min();
    match kind {
        Benchmark::Aezw => BenchmarkDecision {
            wait: 0.0,
            origin: ProcessingOrigin::Edge,
            clamped: false,
        },
        Benchmark::Aecw => BenchmarkDecision {
            wait: (t_min - current_age).max(0.0),
            origin: ProcessingOrigin::Edge,
            clamped: false,
        },
        Benchmark::Alcw => {
            let raw = t_min - model.local_time();
            BenchmarkDecision {
                wait: raw.max(0.0),
                origin: ProcessingOrigin::Local,
                clamped: raw < 0.0,
            }
        }
    }
}

/// One delivered update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UpdateRecord {
    /// Age on delivery `Y_i`, ms.
    pub age: f64,
    /// Wait chosen on delivery `Z_i`, ms.
    pub wait: f64,
    /// Channel state while this update was processed.
    pub channel: usize,
    pub origin: ProcessingOrigin,
    /// Interval area `Q_i`, ms².
    pub area: f64,
    /// `Q_i / (Y_i + Z_i)`, ms.
    pub relaxed: f64,
}

impl UpdateRecord {
    pub fn cycle(&self) -> f64 {
        self.age + self.wait
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectorySummary {
    pub n: usize,
    pub seed: u64,
    /// `sum Q_i / sum (Y_i + Z_i)`, ms.
    pub avg_aop_ratio_of_sums: f64,
    /// `(1/n) sum Q_i / (Y_i + Z_i)`, ms.
    pub avg_aop_mean_of_ratios: f64,
    /// `(1/n) sum (Y_i + Z_i)`, ms.
    pub avg_cycle: f64,
}

impl TrajectorySummary {
    pub fn from_records(records: &[UpdateRecord], seed: u64) -> Self {
        let (area, relaxed, cycle) = records.iter().fold((0.0, 0.0, 0.0), |(a, r, c), rec| {
            (a + rec.area, r + rec.relaxed, c + rec.cycle())
        });
        let n = records.len();
        Self {
            n,
            seed,
            avg_aop_ratio_of_sums: area / cycle,
            avg_aop_mean_of_ratios: relaxed / n as f64,
            avg_cycle: cycle / n as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<UpdateRecord>,
    pub summary: TrajectorySummary,
}

/// Wait before the first simulated update: the grid point closest to
/// `max(T_min - t_l, 0)`, which is what a locally processed update would
/// have waited to meet the constraint.
pub fn initial_wait_index(model: &AopModel) -> usize {
    let target = (model.t_min() - model.local_time()).max(0.0);
    model
        .wait_grid()
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - target).abs().total_cmp(&(*b - target).abs()))
        .map(|(i, _)| i)
        .expect("wait grid is non-empty")
}

/// Simulates `n` updates. The first update is processed locally in channel
/// state 0 after a locally processed predecessor that waited
/// [`initial_wait_index`].
pub fn simulate(
    kind: &PolicyKind,
    n: usize,
    seed: u64,
    model: &AopModel,
) -> Result<Trajectory, SimulationError> {
    if n == 0 {
        return Err(SimulationError::EmptyTrajectory);
    }
    let expected = model.num_states();
    let covered = match kind {
        PolicyKind::Solved(p) => Some(p.len()),
        PolicyKind::Mixture(m) => Some(m.high.len().min(m.low.len())),
        PolicyKind::Benchmark(_) => None,
    };
    if let Some(got) = covered.filter(|&g| g != expected) {
        return Err(SimulationError::PolicyShape { expected, got });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = model.space();
    let z0 = initial_wait_index(model);
    let mut state = AopState {
        prev_age_index: 0,
        prev_wait_index: z0,
        cur_origin: ProcessingOrigin::Local,
        channel_index: 0,
    };
    let mut prev_age = model.local_time();
    let mut prev_wait = model.wait(z0);
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let coin: f64 = rng.random();
        let age = model.cur_age(&state);
        let (wait, origin, wait_index) = match kind {
            PolicyKind::Benchmark(b) => {
                let d = benchmark_decision(*b, age, model);
                (d.wait, d.origin, None)
            }
            PolicyKind::Solved(_) | PolicyKind::Mixture(_) => {
                let index = space
                    .index_of(&state)
                    .ok_or(SimulationError::UnknownState(state))?;
                let a: Action = match kind {
                    PolicyKind::Solved(p) => p.action(index),
                    PolicyKind::Mixture(m) => m.action(index, coin),
                    PolicyKind::Benchmark(_) => unreachable!(),
                };
                (model.wait(a.wait_index), a.next_origin, Some(a.wait_index))
            }
        };
        records.push(UpdateRecord {
            age,
            wait,
            channel: state.channel_index,
            origin: state.cur_origin,
            area: raw_area(prev_age, prev_wait, age, wait),
            relaxed: relaxed_area(prev_age, prev_wait, age, wait),
        });

        let channel_draw: f64 = rng.random();
        let next_channel = model
            .channel()
            .sample_next(state.channel_index, channel_draw);
        state = AopState {
            prev_age_index: state.cur_age_index(),
            // Benchmarks leave the grid; the index is only read by table
            // policies, which always stay on it.
            prev_wait_index: wait_index.unwrap_or(0),
            cur_origin: origin,
            channel_index: next_channel,
        };
        prev_age = age;
        prev_wait = wait;
    }
    let summary = TrajectorySummary::from_records(&records, seed);
    Ok(Trajectory { records, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrefixPoint {
    pub n_prefix: usize,
    #[serde(rename = "q_bar_ms")]
    pub q_bar: f64,
    #[serde(rename = "q_tilde_ms")]
    pub q_tilde: f64,
    pub ratio: f64,
}

/// `1, 2, 5, 10, 20, 50, ...` up to `n`, always ending at `n`.
pub fn log_grid(n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut decade = 1usize;
    'outer: loop {
        for m in [1, 2, 5] {
            let v = m * decade;
            if v >= n {
                break 'outer;
            }
            out.push(v);
        }
        decade *= 10;
    }
    out.push(n);
    out
}

/// Running estimates of both AoP averages on [`log_grid`] prefixes.
pub fn ratio_report(t: &Trajectory) -> Vec<PrefixPoint> {
    let grid = log_grid(t.records.len());
    let mut out = Vec::with_capacity(grid.len());
    let (mut area, mut relaxed, mut cycle) = (0.0, 0.0, 0.0);
    let mut next = grid.iter().peekable();
    for (i, rec) in t.records.iter().enumerate() {
        area += rec.area;
        relaxed += rec.relaxed;
        cycle += rec.cycle();
        if next.peek() == Some(&&(i + 1)) {
            next.next();
            let q_bar = area / cycle;
            let q_tilde = relaxed / (i + 1) as f64;
            out.push(PrefixPoint {
                n_prefix: i + 1,
                q_bar,
                q_tilde,
                ratio: q_bar / q_tilde,
            });
        }
    }
    out
}

/// Corner points of the age sawtooth. At `time_ms` (a delivery instant,
/// measured from the first delivery) the age falls from `peak_age_ms` to the
/// delivered update's age `reset_age_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgeBreakpoint {
    pub time_ms: f64,
    pub peak_age_ms: f64,
    pub reset_age_ms: f64,
}

pub fn age_breakpoints(records: &[UpdateRecord]) -> Vec<AgeBreakpoint> {
    let mut out = Vec::with_capacity(records.len());
    let mut time = 0.0;
    let mut prev: Option<&UpdateRecord> = None;
    for rec in records {
        let peak = match prev {
            None => rec.age,
            Some(p) => {
                let elapsed = p.wait + rec.age;
                time += elapsed;
                p.age + elapsed
            }
        };
        out.push(AgeBreakpoint {
            time_ms: time,
            peak_age_ms: peak,
            reset_age_ms: rec.age,
        });
        prev = Some(rec);
    }
    out
}

/// Mean of a correlated series and its standard error from `batches`
/// equal, non-overlapping batch means. Trailing values that do not fill a
/// batch are dropped from the error estimate but kept in the mean.
pub fn batch_means(values: &[f64], batches: usize) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let batches = batches.clamp(2, n.max(2));
    let size = n / batches;
    if size == 0 {
        return (mean, f64::INFINITY);
    }
    let means: Vec<f64> = values
        .chunks_exact(size)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    policy: &'a str,
    n: usize,
    seed: u64,
    avg_aop_ratio_of_sums_ms: f64,
    avg_aop_mean_of_ratios_ms: f64,
    avg_cycle_ms: f64,
}

/// CSV with header
/// `policy,n,seed,avg_aop_ratio_of_sums_ms,avg_aop_mean_of_ratios_ms,avg_cycle_ms`.
pub fn write_summaries<W: Write>(
    writer: W,
    rows: &[(&str, TrajectorySummary)],
) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    for (policy, s) in rows {
        w.serialize(SummaryRow {
            policy,
            n: s.n,
            seed: s.seed,
            avg_aop_ratio_of_sums_ms: s.avg_aop_ratio_of_sums,
            avg_aop_mean_of_ratios_ms: s.avg_aop_mean_of_ratios,
            avg_cycle_ms: s.avg_cycle,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| SimulationError::Io(e.to_string()))
}

/// CSV with header `n_prefix,q_bar_ms,q_tilde_ms,ratio`.
pub fn write_prefix_series<W: Write>(
    writer: W,
    points: &[PrefixPoint],
) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SimulationError::Io(e.to_string()))
}

/// CSV with header `time_ms,peak_age_ms,reset_age_ms`.
pub fn write_breakpoints<W: Write>(
    writer: W,
    points: &[AgeBreakpoint],
) -> Result<(), SimulationError> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p).map_err(csv_err)?;
    }
    w.flush().map_err(|e| SimulationError::Io(e.to_string()))
}

fn csv_err(e: csv::Error) -> SimulationError {
    SimulationError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aop_model::{ChannelModel, ChannelState};
    use proptest::prelude::*;

    #[test]
    fn benchmark_waits() {
        let model = AopModel::default_scenario();
        assert_eq!(
            benchmark_decision(Benchmark::Aecw, 550.0, &model).wait,
            650.0
        );
        assert_eq!(
            benchmark_decision(Benchmark::Aecw, 2050.0, &model).wait,
            0.0
        );
        let alcw = benchmark_decision(Benchmark::Alcw, 1000.0, &model);
        assert_eq!(
            (alcw.wait, alcw.origin, alcw.clamped),
            (200.0, ProcessingOrigin::Local, false)
        );
        let aezw = benchmark_decision(Benchmark::Aezw, 1050.0, &model);
        assert_eq!((aezw.wait, aezw.origin), (0.0, ProcessingOrigin::Edge));
    }

    #[test]
    fn alcw_clamps_when_local_exceeds_constraint() {
        let base = AopModel::default_scenario();
        let mut cfg = base.config().clone();
        cfg.t_min = 800.0;
        let model = AopModel::new(cfg, base.channel().clone()).unwrap();
        let d = benchmark_decision(Benchmark::Alcw, 1000.0, &model);
        assert_eq!(d.wait, 0.0);
        assert!(d.clamped);
    }

    #[test]
    fn alcw_is_exact() {
        let model = AopModel::default_scenario();
        for seed in [0, 1, 99] {
            let t = simulate(&PolicyKind::Benchmark(Benchmark::Alcw), 1000, seed, &model).unwrap();
            assert_eq!(t.summary.avg_aop_ratio_of_sums, 1600.0);
            assert_eq!(t.summary.avg_aop_mean_of_ratios, 1600.0);
            assert_eq!(t.summary.avg_cycle, 1200.0);
            assert!(ratio_report(&t).iter().all(|p| p.ratio == 1.0));
        }
    }

    #[test]
    fn batch_means_of_iid_blocks() {
        let values: Vec<f64> = (0..100)
            .map(|i| if (i / 10) % 2 == 0 { 1.0 } else { 3.0 })
            .collect();
        let (mean, se) = batch_means(&values, 10);
        assert_eq!(mean, 2.0);
        // batch means alternate 1, 3: sample sd 1.054, se = sd / sqrt(10)
        let expected = (10.0f64 / 9.0).sqrt() / 10f64.sqrt();
        assert!((se - expected).abs() < 1e-12);
    }

    #[test]
    fn log_grid_shape() {
        assert_eq!(log_grid(1), vec![1]);
        assert_eq!(log_grid(7), vec![1, 2, 5, 7]);
        assert_eq!(log_grid(100), vec![1, 2, 5, 10, 20, 50, 100]);
    }

    #[test]
    fn single_update_prefix_is_consistent() {
        let model = AopModel::default_scenario();
        let t = simulate(&PolicyKind::Benchmark(Benchmark::Aecw), 1, 5, &model).unwrap();
        let p = ratio_report(&t)[0];
        let r = t.records[0];
        assert_eq!(p.n_prefix, 1);
        assert!((p.q_bar - p.q_tilde * r.cycle() / r.cycle()).abs() < 1e-12);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let model = AopModel::default_scenario();
        assert!(matches!(
            simulate(&PolicyKind::Benchmark(Benchmark::Aezw), 0, 1, &model),
            Err(SimulationError::EmptyTrajectory)
        ));
    }

    #[test]
    fn breakpoints_follow_the_sawtooth() {
        let model = AopModel::default_scenario();
        let t = simulate(&PolicyKind::Benchmark(Benchmark::Alcw), 3, 1, &model).unwrap();
        let b = age_breakpoints(&t.records);
        assert_eq!(b[1].time_ms, 1200.0);
        assert_eq!(b[1].peak_age_ms, 2200.0);
        assert_eq!(b[2].time_ms, 2400.0);
        assert!(b.iter().all(|p| p.reset_age_ms == 1000.0));
    }

    #[test]
    fn single_channel_aezw_is_deterministic_cycle() {
        let base = AopModel::default_scenario();
        let chan = ChannelModel::new(
            vec![ChannelState {
                label: "only".into(),
                tx_time: 300.0,
            }],
            vec![vec![1.0]],
        )
        .unwrap();
        let model = AopModel::new(base.config().clone(), chan).unwrap();
        let t = simulate(&PolicyKind::Benchmark(Benchmark::Aezw), 50, 3, &model).unwrap();
        // from the third record on, both the previous and current update are offloaded
        for r in &t.records[2..] {
            assert_eq!(r.age, 350.0);
            assert_eq!(r.relaxed, 350.0 + 175.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn summary_and_record_algebra(seed in any::<u64>(), n in 1usize..400, which in 0usize..3) {
            let model = AopModel::default_scenario();
            let kind = PolicyKind::Benchmark(Benchmark::ALL[which]);
            let a = simulate(&kind, n, seed, &model).unwrap();
            let b = simulate(&kind, n, seed, &model).unwrap();
            prop_assert_eq!(&a.records, &b.records);
            for r in &a.records {
                prop_assert!((r.area - r.relaxed * r.cycle()).abs() <= 1e-9 * r.area);
            }
            let s = TrajectorySummary::from_records(&a.records, seed);
            prop_assert_eq!(s, a.summary);
        }
    }
}
