use super::ConfigError;

const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub label: String,
    /// Transmission time of one update's input data in this state, ms.
    pub tx_time: f64,
}

/// Finite-state Markov uplink. State `m` is worse than state `m - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    states: Vec<ChannelState>,
    transition: Vec<Vec<f64>>,
}

impl ChannelModel {
    pub fn new(states: Vec<ChannelState>, transition: Vec<Vec<f64>>) -> Result<Self, ConfigError> {
        let invalid = |reason: String| ConfigError::Invalid {
            field: "channel",
            reason,
        };
        if states.is_empty() {
            return Err(invalid("needs at least one state".into()));
        }
        if let Some(s) = states
            .iter()
            .find(|s| !(s.tx_time.is_finite() && s.tx_time > 0.0))
        {
            return Err(invalid(format!(
                "tx_time of state '{}' must be positive, got {}",
                s.label, s.tx_time
            )));
        }
        if states.windows(2).any(|w| w[1].tx_time <= w[0].tx_time) {
            return Err(invalid(
                "tx_time must strictly increase with state index".into(),
            ));
        }
        let n = states.len();
        if transition.len() != n || transition.iter().any(|row| row.len() != n) {
            return Err(invalid(format!("transition must be {n}x{n}")));
        }
        for (i, row) in transition.iter().enumerate() {
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(invalid(format!(
                    "row {i} has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("row {i} sums to {sum}, expected 1")));
            }
        }
        Ok(Self { states, transition })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[ChannelState] {
        &self.states
    }

    pub fn tx_time(&self, index: usize) -> f64 {
        self.states[index].tx_time
    }

    pub fn row(&self, index: usize) -> &[f64] {
        &self.transition[index]
    }

    pub fn transition(&self) -> &[Vec<f64>] {
        &self.transition
    }

    /// Next channel state for a uniform draw in `[0, 1)` by inverting the
    /// row's cumulative distribution.
    pub fn sample_next(&self, current: usize, draw: f64) -> usize {
        let row = &self.transition[current];
        let mut acc = 0.0;
        let mut last_positive = current;
        for (m, &p) in row.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last_positive = m;
            if draw < acc {
                return m;
            }
        }
        // Row sums can fall a few ulps short of 1.
        last_positive
    }

    /// Copy with new transmission times, same transition matrix.
    pub fn with_tx_times(&self, tx_times: &[f64]) -> Result<Self, ConfigError> {
        if tx_times.len() != self.states.len() {
            return Err(ConfigError::Invalid {
                field: "channel",
                reason: format!(
                    "expected {} tx times, got {}",
                    self.states.len(),
                    tx_times.len()
                ),
            });
        }
        let states = self
            .states
            .iter()
            .zip(tx_times)
            .map(|(s, &t)| ChannelState {
                label: s.label.clone(),
                tx_time: t,
            })
            .collect();
        Self::new(states, self.transition.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn states(times: &[f64]) -> Vec<ChannelState> {
        times
            .iter()
            .enumerate()
            .map(|(i, &t)| ChannelState {
                label: format!("s{i}"),
                tx_time: t,
            })
            .collect()
    }

    #[test]
    fn rejects_bad_rows() {
        let err = ChannelModel::new(states(&[1.0, 2.0]), vec![vec![0.5, 0.6], vec![0.5, 0.5]]);
        assert!(err.is_err());
        let err = ChannelModel::new(states(&[1.0, 2.0]), vec![vec![1.2, -0.2], vec![0.5, 0.5]]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_increasing_tx_times() {
        let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        assert!(ChannelModel::new(states(&[2.0, 2.0]), p.clone()).is_err());
        assert!(ChannelModel::new(states(&[3.0, 2.0]), p.clone()).is_err());
        assert!(ChannelModel::new(states(&[0.0, 2.0]), p).is_err());
    }

    #[test]
    fn sampling_follows_row() {
        let ch = ChannelModel::new(
            states(&[1.0, 2.0, 3.0]),
            vec![
                vec![0.85, 0.15, 0.0],
                vec![0.15, 0.7, 0.15],
                vec![0.0, 0.15, 0.85],
            ],
        )
        .unwrap();
        assert_eq!(ch.sample_next(0, 0.0), 0);
        assert_eq!(ch.sample_next(0, 0.8499), 0);
        assert_eq!(ch.sample_next(0, 0.85), 1);
        assert_eq!(ch.sample_next(0, 0.999_999_999), 1);
        assert_eq!(ch.sample_next(2, 0.0), 1);
        assert_eq!(ch.sample_next(2, 0.2), 2);
    }
}
