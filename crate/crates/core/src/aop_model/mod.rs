//! The status-update loop as a finite controlled Markov process.
//!
//! At each delivery instant the device observes
//! `(previous age, previous wait, current age, channel)`, picks a wait and
//! where to process the next update, and pays the area of the age curve
//! accumulated over the sampling interval.

mod channel;
pub mod config;
mod state;

use thiserror::Error;

pub use channel::{ChannelModel, ChannelState};
pub use config::{
    edge_execution_time, load_config, local_processing_time, offloading_rate, parse_override,
    path_loss_db, transmission_time_from_rate, ConfigFile, SystemConfig,
};
pub use state::{age_index, Action, AopState, ProcessingOrigin, StateSpace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field} must be positive, got {value}")]
    NotPositive { field: &'static str, value: f64 },
    #[error("{field} must be finite")]
    NotFinite { field: &'static str },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("offloading rate is zero")]
    ZeroRate,
    #[error(
        "local processing time {local_ms} ms equals edge time over channel state {channel} \
         ({edge_ms} ms); ages would be ambiguous"
    )]
    AgeCollision {
        local_ms: f64,
        edge_ms: f64,
        channel: usize,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config io error: {0}")]
    Io(String),
    #[error("bad override '{key}': {reason}")]
    Override { key: String, reason: String },
}

/// Area under the age curve over one sampling interval: the parallelogram
/// `(Y_prev + Z_prev) Y` plus the triangle `(Y + Z)^2 / 2`, in ms².
pub fn raw_area(prev_age: f64, prev_wait: f64, age: f64, wait: f64) -> f64 {
    let cycle = age + wait;
    (prev_age + prev_wait) * age + 0.5 * cycle * cycle
}

/// Interval area divided by the interval length, in ms.
pub fn relaxed_area(prev_age: f64, prev_wait: f64, age: f64, wait: f64) -> f64 {
    let cycle = age + wait;
    (prev_age + prev_wait) / cycle * age + 0.5 * cycle
}

/// Model with its enumerated state space, transition table and reward
/// tables. Immutable once built.
#[derive(Debug, Clone)]
pub struct AopModel {
    config: SystemConfig,
    channel: ChannelModel,
    space: StateSpace,
    local_time: f64,
    edge_exec_time: f64,
    ages: Vec<f64>,
    successors: Vec<Vec<(usize, f64)>>,
    relaxed: Vec<f64>,
    cycle: Vec<f64>,
}

impl AopModel {
    pub fn new(config: SystemConfig, channel: ChannelModel) -> Result<Self, ConfigError> {
        config.validate()?;
        let local_time = local_processing_time(&config);
        let edge_exec_time = edge_execution_time(&config);
        let mut ages = vec![local_time];
        ages.extend(channel.states().iter().map(|s| edge_exec_time + s.tx_time));
        if let Some(m) = ages[1..].iter().position(|&a| a == local_time) {
            return Err(ConfigError::AgeCollision {
                local_ms: local_time,
                edge_ms: ages[1 + m],
                channel: m,
            });
        }
        let space = StateSpace::new(config.wait_grid.len(), channel.len());

        let mut model = Self {
            config,
            channel,
            space,
            local_time,
            edge_exec_time,
            ages,
            successors: Vec::new(),
            relaxed: Vec::new(),
            cycle: Vec::new(),
        };
        let n_pairs = model.space.len() * model.space.num_actions();
        let mut successors = Vec::with_capacity(n_pairs);
        let mut relaxed = Vec::with_capacity(n_pairs);
        let mut cycle = Vec::with_capacity(n_pairs);
        for s in model.space.states() {
            for a in model.space.actions() {
                successors.push(
                    model
                        .transition_distribution(s, a)
                        .into_iter()
                        .map(|(next, p)| (model.space.index_of(&next).expect("enumerated"), p))
                        .collect(),
                );
                relaxed.push(model.relaxed_reward(s, a));
                cycle.push(model.cycle_length(s, a));
            }
        }
        model.successors = successors;
        model.relaxed = relaxed;
        model.cycle = cycle;
        Ok(model)
    }

    /// Default scenario bundled with the crate.
    pub fn default_scenario() -> Self {
        let (cfg, chan) = ConfigFile::default_scenario()
            .to_model_inputs()
            .expect("bundled config is valid");
        Self::new(cfg, chan).expect("bundled config is valid")
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn num_states(&self) -> usize {
        self.space.len()
    }

    pub fn num_actions(&self) -> usize {
        self.space.num_actions()
    }

    pub fn t_min(&self) -> f64 {
        self.config.t_min
    }

    pub fn local_time(&self) -> f64 {
        self.local_time
    }

    pub fn edge_exec_time(&self) -> f64 {
        self.edge_exec_time
    }

    /// Reachable age values; index 0 is local, `1 + m` is edge over channel `m`.
    pub fn age_values(&self) -> &[f64] {
        &self.ages
    }

    pub fn wait(&self, wait_index: usize) -> f64 {
        self.config.wait_grid[wait_index]
    }

    pub fn wait_grid(&self) -> &[f64] {
        &self.config.wait_grid
    }

    /// Processing time of an update sent to `origin` while the channel is in
    /// `channel_index`.
    pub fn age_after_processing(&self, origin: ProcessingOrigin, channel_index: usize) -> f64 {
        self.ages[age_index(origin, channel_index)]
    }

    pub fn prev_age(&self, s: &AopState) -> f64 {
        self.ages[s.prev_age_index]
    }

    pub fn cur_age(&self, s: &AopState) -> f64 {
        self.ages[s.cur_age_index()]
    }

    /// Successor states with their probabilities. Zero-probability channel
    /// moves are omitted.
    pub fn transition_distribution(&self, s: &AopState, a: &Action) -> Vec<(AopState, f64)> {
        let prev_age_index = s.cur_age_index();
        self.channel
            .row(s.channel_index)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(m, &p)| {
                (
                    AopState {
                        prev_age_index,
                        prev_wait_index: a.wait_index,
                        cur_origin: a.next_origin,
                        channel_index: m,
                    },
                    p,
                )
            })
            .collect()
    }

    /// Sampling interval `Y_i + Z_i`, ms.
    pub fn cycle_length(&self, s: &AopState, a: &Action) -> f64 {
        self.cur_age(s) + self.wait(a.wait_index)
    }

    pub fn raw_area_reward(&self, s: &AopState, a: &Action) -> f64 {
        raw_area(
            self.prev_age(s),
            self.wait(s.prev_wait_index),
            self.cur_age(s),
            self.wait(a.wait_index),
        )
    }

    pub fn relaxed_reward(&self, s: &AopState, a: &Action) -> f64 {
        relaxed_area(
            self.prev_age(s),
            self.wait(s.prev_wait_index),
            self.cur_age(s),
            self.wait(a.wait_index),
        )
    }

    pub fn lagrange_reward(&self, s: &AopState, a: &Action, lambda: f64) -> f64 {
        self.relaxed_reward(s, a) - lambda * self.cycle_length(s, a)
    }

    fn pair(&self, state: usize, action: usize) -> usize {
        state * self.space.num_actions() + action
    }

    /// Cached successor list by dense indices.
    pub fn successors(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.successors[self.pair(state, action)]
    }

    /// Cached relaxed reward by dense indices.
    pub fn relaxed_at(&self, state: usize, action: usize) -> f64 {
        self.relaxed[self.pair(state, action)]
    }

    /// Cached cycle length by dense indices.
    pub fn cycle_at(&self, state: usize, action: usize) -> f64 {
        self.cycle[self.pair(state, action)]
    }

    pub fn lagrange_at(&self, state: usize, action: usize, lambda: f64) -> f64 {
        self.relaxed_at(state, action) - lambda * self.cycle_at(state, action)
    }

    /// Copy of this model with other channel transmission times.
    pub fn with_tx_times(&self, tx_times: &[f64]) -> Result<Self, ConfigError> {
        Self::new(self.config.clone(), self.channel.with_tx_times(tx_times)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table1() -> AopModel {
        AopModel::default_scenario()
    }

    fn cfg() -> SystemConfig {
        table1().config().clone()
    }

    #[test]
    fn processing_times() {
        let mut c = cfg();
        assert_relative_eq!(local_processing_time(&c), 1000.0, max_relative = 1e-12);
        assert_relative_eq!(edge_execution_time(&c), 50.0, max_relative = 1e-12);
        c.cycles = 2.0e9;
        assert_relative_eq!(local_processing_time(&c), 2000.0, max_relative = 1e-12);
        assert_relative_eq!(edge_execution_time(&c), 100.0, max_relative = 1e-12);
        c.edge_freq = c.local_freq;
        assert_eq!(edge_execution_time(&c), local_processing_time(&c));
    }

    #[test]
    fn zero_cycles_rejected() {
        let mut c = cfg();
        c.cycles = 0.0;
        assert!(matches!(
            c.validate(),
            Err(ConfigError::NotPositive {
                field: "cycles",
                ..
            })
        ));
        let mut c = cfg();
        c.input_size = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn path_loss_values() {
        assert_relative_eq!(path_loss_db(0.1).unwrap(), 104.0, max_relative = 1e-12);
        assert_eq!(path_loss_db(1.0).unwrap(), 140.7);
        assert_relative_eq!(path_loss_db(10.0).unwrap(), 177.4, max_relative = 1e-12);
        assert!(path_loss_db(0.0).is_err());
        assert!(path_loss_db(-1.0).is_err());
    }

    #[test]
    fn offloading_rate_and_tx_time() {
        let c = cfg();
        // SNR = 10^(20/10) * 10^(-104/10) / 10^(-100/10) = 10^1.6
        let snr = 10f64.powf(1.6);
        assert_relative_eq!(config::link_snr(&c).unwrap(), snr, max_relative = 1e-12);
        let rate = offloading_rate(&c).unwrap();
        assert_relative_eq!(rate, 2e7 * (1.0 + snr).log2(), max_relative = 1e-12);
        assert!((rate - 1.070e8).abs() < 0.001e8);
        let t = transmission_time_from_rate(&c).unwrap();
        assert_relative_eq!(t, 4.0e6 / rate * 1e3, max_relative = 1e-12);
        assert!((t - 37.4).abs() < 0.05);

        assert_eq!(config::shannon_rate(2e7, 0.0), 0.0);
        assert_eq!(config::shannon_rate(2e7, 1.0), 2e7);
    }

    #[test]
    fn age_after_processing_values() {
        let m = table1();
        assert_eq!(m.age_after_processing(ProcessingOrigin::Edge, 0), 550.0);
        assert_eq!(m.age_after_processing(ProcessingOrigin::Edge, 2), 2050.0);
        for ch in 0..3 {
            assert_eq!(m.age_after_processing(ProcessingOrigin::Local, ch), 1000.0);
        }
    }

    #[test]
    fn collision_rejected() {
        let c = cfg();
        // t_ex = 50, so a 950 ms state collides with t_l = 1000.
        let chan = ChannelModel::new(
            vec![
                ChannelState {
                    label: "a".into(),
                    tx_time: 500.0,
                },
                ChannelState {
                    label: "b".into(),
                    tx_time: 950.0,
                },
            ],
            vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        )
        .unwrap();
        assert!(matches!(
            AopModel::new(c, chan),
            Err(ConfigError::AgeCollision { channel: 1, .. })
        ));
    }

    fn state(
        prev_age_index: usize,
        prev_wait_index: usize,
        cur_origin: ProcessingOrigin,
        channel_index: usize,
    ) -> AopState {
        AopState {
            prev_age_index,
            prev_wait_index,
            cur_origin,
            channel_index,
        }
    }

    #[test]
    fn transition_rows_from_channel() {
        let m = table1();
        let s = state(0, 1, ProcessingOrigin::Edge, 0);
        let a = Action {
            wait_index: 0,
            next_origin: ProcessingOrigin::Edge,
        };
        let d = m.transition_distribution(&s, &a);
        assert_eq!(d.len(), 2);
        assert_eq!(d[0], (state(1, 0, ProcessingOrigin::Edge, 0), 0.85));
        assert_eq!(d[1], (state(1, 0, ProcessingOrigin::Edge, 1), 0.15));

        let s = state(2, 0, ProcessingOrigin::Edge, 1);
        let a = Action {
            wait_index: 1,
            next_origin: ProcessingOrigin::Edge,
        };
        let probs: Vec<f64> = m
            .transition_distribution(&s, &a)
            .iter()
            .map(|x| x.1)
            .collect();
        assert_eq!(probs, vec![0.15, 0.7, 0.15]);

        let a = Action {
            wait_index: 3,
            next_origin: ProcessingOrigin::Local,
        };
        let d = m.transition_distribution(&s, &a);
        assert!(d.iter().all(|(n, _)| m.cur_age(n) == 1000.0));
        let channels: Vec<usize> = d.iter().map(|(n, _)| n.channel_index).collect();
        assert_eq!(channels, vec![0, 1, 2]);
        assert!((d.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reward_values() {
        assert_eq!(raw_area(1000.0, 200.0, 550.0, 0.0), 811_250.0);
        assert_eq!(raw_area(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(raw_area(1000.0, 200.0, 1000.0, 200.0), 1.92e6);
        assert_eq!(relaxed_area(1000.0, 200.0, 1000.0, 200.0), 1600.0);
        assert_eq!(relaxed_area(1000.0, 200.0, 550.0, 0.0), 1475.0);
        // equal consecutive cycles: ratio 1
        assert_eq!(relaxed_area(700.0, 300.0, 800.0, 200.0), 800.0 + 500.0);

        let m = table1();
        let alcw = state(0, 1, ProcessingOrigin::Local, 1);
        let a = Action {
            wait_index: 1,
            next_origin: ProcessingOrigin::Local,
        };
        assert_eq!(m.relaxed_reward(&alcw, &a), 1600.0);
        assert_eq!(m.lagrange_reward(&alcw, &a, 0.0), 1600.0);
        assert_eq!(m.lagrange_reward(&alcw, &a, 1.0), 400.0);
        let s = state(0, 1, ProcessingOrigin::Edge, 0);
        let a = Action {
            wait_index: 0,
            next_origin: ProcessingOrigin::Edge,
        };
        assert_eq!(m.lagrange_reward(&s, &a, 0.5), 1200.0);
    }

    #[test]
    fn channel_coupling_of_enumerated_states() {
        let m = table1();
        for s in m.space().states() {
            match s.cur_origin {
                ProcessingOrigin::Edge => {
                    assert_eq!(m.cur_age(s), 50.0 + m.channel().tx_time(s.channel_index))
                }
                ProcessingOrigin::Local => assert_eq!(m.cur_age(s), 1000.0),
            }
        }
    }

    #[test]
    fn cached_tables_match_lazy_rewards_bit_exactly() {
        let m = table1();
        let lambda = 0.37;
        for (i, s) in m.space().states().iter().enumerate() {
            for (j, a) in m.space().actions().iter().enumerate() {
                assert_eq!(
                    m.relaxed_at(i, j).to_bits(),
                    m.relaxed_reward(s, a).to_bits()
                );
                assert_eq!(m.cycle_at(i, j).to_bits(), m.cycle_length(s, a).to_bits());
                assert_eq!(
                    m.lagrange_at(i, j, lambda).to_bits(),
                    m.lagrange_reward(s, a, lambda).to_bits()
                );
            }
        }
    }

    #[test]
    fn every_row_is_stochastic_and_identities_hold() {
        let m = table1();
        for (i, s) in m.space().states().iter().enumerate() {
            for (j, a) in m.space().actions().iter().enumerate() {
                let succ = m.successors(i, j);
                assert!(succ.iter().all(|&(_, p)| p >= 0.0));
                assert!((succ.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() <= 1e-12);
                let raw = m.raw_area_reward(s, a);
                let rel = m.relaxed_reward(s, a) * m.cycle_length(s, a);
                assert!((raw - rel).abs() <= 1e-12 * raw.abs());
                assert_eq!(m.lagrange_reward(s, a, 0.0), m.relaxed_reward(s, a));
            }
        }
    }

    proptest! {
        #[test]
        fn area_identity(yp in 1.0f64..3000.0, zp in 0.0f64..1000.0, y in 1.0f64..3000.0, z in 0.0f64..1000.0) {
            let raw = raw_area(yp, zp, y, z);
            let rel = relaxed_area(yp, zp, y, z) * (y + z);
            prop_assert!((raw - rel).abs() <= 1e-12 * raw);
        }

        #[test]
        fn random_model_cardinality(
            waits in 1usize..5,
            tx in proptest::collection::vec(1.0f64..400.0, 1..4),
        ) {
            let mut c = cfg();
            c.wait_grid = (0..waits).map(|w| 100.0 * w as f64).collect();
            // strictly increasing tx times, offset so nothing hits t_l = 1000
            let mut t = 1.0;
            let states: Vec<ChannelState> = tx.iter().enumerate().map(|(i, d)| {
                t += d;
                ChannelState { label: format!("s{i}"), tx_time: t + 1e4 }
            }).collect();
            let k = states.len();
            let row = vec![1.0 / k as f64; k];
            let mut rows = vec![row; k];
            for r in rows.iter_mut() { let s: f64 = r[..k-1].iter().sum(); r[k-1] = 1.0 - s; }
            let model = AopModel::new(c, ChannelModel::new(states, rows).unwrap()).unwrap();
            prop_assert_eq!(model.num_states(), (k + 1) * waits * 2 * k);
            prop_assert_eq!(model.age_values().len(), k + 1);
        }
    }
}
