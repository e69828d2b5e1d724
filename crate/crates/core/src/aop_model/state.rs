use std::fmt;

use serde::{Deserialize, Serialize};

/// Where an update is processed. `Edge` is encoded as 0 and `Local` as 1,
/// so the derived ordering puts `Edge` first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessingOrigin {
    Edge = 0,
    Local = 1,
}

impl ProcessingOrigin {
    pub const ALL: [ProcessingOrigin; 2] = [ProcessingOrigin::Edge, ProcessingOrigin::Local];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        match code {
            0 => Some(Self::Edge),
            1 => Some(Self::Local),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Edge => "edge",
            Self::Local => "local",
        }
    }
}

impl fmt::Display for ProcessingOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProcessingOrigin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "edge" => Ok(Self::Edge),
            "local" => Ok(Self::Local),
            other => Err(format!("unknown origin '{other}'")),
        }
    }
}

/// Decision-epoch state: previous age and wait, how the current update was
/// processed, and the current channel state.
///
/// `prev_age_index` indexes the reachable age set, where 0 is the local
/// processing time and `1 + m` is edge processing over channel state `m`.
/// The current age is never stored: it follows from `cur_origin` and
/// `channel_index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AopState {
    pub prev_age_index: usize,
    pub prev_wait_index: usize,
    pub cur_origin: ProcessingOrigin,
    pub channel_index: usize,
}

impl AopState {
    /// Index of the current age in the reachable age set.
    pub fn cur_age_index(&self) -> usize {
        age_index(self.cur_origin, self.channel_index)
    }
}

/// Position of `(origin, channel)` in the reachable age set.
pub fn age_index(origin: ProcessingOrigin, channel_index: usize) -> usize {
    match origin {
        ProcessingOrigin::Local => 0,
        ProcessingOrigin::Edge => 1 + channel_index,
    }
}

/// Wait before the next sample, plus where that next update is processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Action {
    pub wait_index: usize,
    pub next_origin: ProcessingOrigin,
}

/// Dense enumeration of states and actions.
///
/// States are ordered lexicographically by
/// `(prev_age_index, prev_wait_index, cur_origin, channel_index)` and
/// actions by `(wait_index, next_origin)`, so indices are computed
/// arithmetically in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    num_ages: usize,
    num_waits: usize,
    num_channels: usize,
    states: Vec<AopState>,
    actions: Vec<Action>,
}

impl StateSpace {
    pub fn new(num_waits: usize, num_channels: usize) -> Self {
        let num_ages = num_channels + 1;
        let mut states = Vec::with_capacity(num_ages * num_waits * 2 * num_channels);
        for prev_age_index in 0..num_ages {
            for prev_wait_index in 0..num_waits {
                for cur_origin in ProcessingOrigin::ALL {
                    for channel_index in 0..num_channels {
                        states.push(AopState {
                            prev_age_index,
                            prev_wait_index,
                            cur_origin,
                            channel_index,
                        });
                    }
                }
            }
        }
        let actions = (0..num_waits)
            .flat_map(|wait_index| {
                ProcessingOrigin::ALL.map(|next_origin| Action {
                    wait_index,
                    next_origin,
                })
            })
            .collect();
        Self {
            num_ages,
            num_waits,
            num_channels,
            states,
            actions,
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn num_ages(&self) -> usize {
        self.num_ages
    }

    pub fn num_waits(&self) -> usize {
        self.num_waits
    }

    pub fn num_channels(&self) -> usize {
        self.num_channels
    }

    pub fn states(&self) -> &[AopState] {
        &self.states
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn state(&self, index: usize) -> AopState {
        self.states[index]
    }

    pub fn action(&self, index: usize) -> Action {
        self.actions[index]
    }

    pub fn index_of(&self, s: &AopState) -> Option<usize> {
        if s.prev_age_index >= self.num_ages
            || s.prev_wait_index >= self.num_waits
            || s.channel_index >= self.num_channels
        {
            return None;
        }
        let i = ((s.prev_age_index * self.num_waits + s.prev_wait_index) * 2 + s.cur_origin.code())
            * self.num_channels
            + s.channel_index;
        Some(i)
    }

    pub fn action_index(&self, a: &Action) -> Option<usize> {
        (a.wait_index < self.num_waits).then(|| a.wait_index * 2 + a.next_origin.code())
    }
}
