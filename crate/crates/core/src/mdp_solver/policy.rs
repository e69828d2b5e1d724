use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::aop_model::{Action, AopModel, ProcessingOrigin};

use super::SolverError;

/// One action per state, indexed like [`crate::aop_model::StateSpace`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StationaryDeterministicPolicy {
    actions: Vec<Action>,
}

impl StationaryDeterministicPolicy {
    pub fn new(actions: Vec<Action>, model: &AopModel) -> Result<Self, SolverError> {
        if actions.len() != model.num_states() {
            return Err(SolverError::PolicyShape {
                expected: model.num_states(),
                got: actions.len(),
            });
        }
        if let Some(i) = actions
            .iter()
            .position(|a| model.space().action_index(a).is_none())
        {
            return Err(SolverError::InvalidAction { state: i });
        }
        Ok(Self { actions })
    }

    /// Same action in every state.
    pub fn constant(action: Action, model: &AopModel) -> Self {
        Self {
            actions: vec![action; model.num_states()],
        }
    }

    pub fn from_fn(
        model: &AopModel,
        mut f: impl FnMut(usize) -> Action,
    ) -> Result<Self, SolverError> {
        Self::new((0..model.num_states()).map(&mut f).collect(), model)
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn action(&self, state: usize) -> Action {
        self.actions[state]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Dense action index per state.
    pub fn action_indices(&self, model: &AopModel) -> Vec<usize> {
        self.actions
            .iter()
            .map(|a| {
                model
                    .space()
                    .action_index(a)
                    .expect("validated on construction")
            })
            .collect()
    }

    /// States at which two policies disagree.
    pub fn differing_states(&self, other: &Self) -> Vec<usize> {
        self.actions
            .iter()
            .zip(&other.actions)
            .enumerate()
            .filter_map(|(i, (a, b))| (a != b).then_some(i))
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PolicyRow {
    state: usize,
    prev_age_ms: f64,
    prev_wait_ms: f64,
    cur_origin: ProcessingOrigin,
    channel: usize,
    cur_age_ms: f64,
    wait_ms: f64,
    origin: ProcessingOrigin,
}

/// Writes the policy as CSV with header
/// `state,prev_age_ms,prev_wait_ms,cur_origin,channel,cur_age_ms,wait_ms,origin`.
pub fn write_policy_table<W: Write>(
    writer: W,
    policy: &StationaryDeterministicPolicy,
    model: &AopModel,
) -> Result<(), SolverError> {
    let mut w = csv::Writer::from_writer(writer);
    for (i, s) in model.space().states().iter().enumerate() {
        let a = policy.action(i);
        w.serialize(PolicyRow {
            state: i,
            prev_age_ms: model.prev_age(s),
            prev_wait_ms: model.wait(s.prev_wait_index),
            cur_origin: s.cur_origin,
            channel: s.channel_index,
            cur_age_ms: model.cur_age(s),
            wait_ms: model.wait(a.wait_index),
            origin: a.next_origin,
        })
        .map_err(table_err)?;
    }
    w.flush()
        .map_err(|e| SolverError::PolicyTable(e.to_string()))
}

/// Reads a table written by [`write_policy_table`]. Waits must lie on the
/// model's grid, state columns must match the model and every state must
/// appear exactly once.
pub fn read_policy_table<R: Read>(
    reader: R,
    model: &AopModel,
) -> Result<StationaryDeterministicPolicy, SolverError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut actions: Vec<Option<Action>> = vec![None; model.num_states()];
    for row in r.deserialize::<PolicyRow>() {
        let row = row.map_err(table_err)?;
        let slot = actions
            .get_mut(row.state)
            .ok_or_else(|| SolverError::PolicyTable(format!("state {} out of range", row.state)))?;
        if slot.is_some() {
            return Err(SolverError::PolicyTable(format!(
                "state {} listed twice",
                row.state
            )));
        }
        let s = model.space().state(row.state);
        if row.prev_age_ms != model.prev_age(&s)
            || row.prev_wait_ms != model.wait(s.prev_wait_index)
            || row.cur_origin != s.cur_origin
            || row.channel != s.channel_index
        {
            return Err(SolverError::PolicyTable(format!(
                "row for state {} does not match the model's state description",
                row.state
            )));
        }
        let wait_index = model
            .wait_grid()
            .iter()
            .position(|&w| w == row.wait_ms)
            .ok_or_else(|| {
                SolverError::PolicyTable(format!("wait {} ms is not on the grid", row.wait_ms))
            })?;
        *slot = Some(Action {
            wait_index,
            next_origin: row.origin,
        });
    }
    let actions = actions
        .into_iter()
        .enumerate()
        .map(|(i, a)| a.ok_or_else(|| SolverError::PolicyTable(format!("state {i} missing"))))
        .collect::<Result<Vec<_>, _>>()?;
    StationaryDeterministicPolicy::new(actions, model)
}

fn table_err(e: csv::Error) -> SolverError {
    SolverError::PolicyTable(e.to_string())
}

/// One state of a policy, arranged for the threshold check: the column is
/// fixed by the current age and channel, the key is the previous cycle.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdRow {
    pub cur_origin: ProcessingOrigin,
    pub channel: usize,
    pub cur_age_ms: f64,
    pub prev_sum_ms: f64,
    pub prev_age_ms: f64,
    pub prev_wait_ms: f64,
    pub wait_ms: f64,
    pub origin: ProcessingOrigin,
    /// Wait is shorter than at a smaller previous cycle in the same column.
    pub violation: bool,
}

/// Rows sorted by column and previous cycle `Y_{i-1} + Z_{i-1}`, each flagged
/// when its wait drops below the largest wait seen at a strictly smaller
/// previous cycle in the same column.
pub fn threshold_report(
    policy: &StationaryDeterministicPolicy,
    model: &AopModel,
) -> Vec<ThresholdRow> {
    let mut rows: Vec<ThresholdRow> = model
        .space()
        .states()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let prev_age_ms = model.prev_age(s);
            let prev_wait_ms = model.wait(s.prev_wait_index);
            ThresholdRow {
                cur_origin: s.cur_origin,
                channel: s.channel_index,
                cur_age_ms: model.cur_age(s),
                prev_sum_ms: prev_age_ms + prev_wait_ms,
                prev_age_ms,
                prev_wait_ms,
                wait_ms: model.wait(policy.action(i).wait_index),
                origin: policy.action(i).next_origin,
                violation: false,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.cur_origin.code(), a.channel)
            .cmp(&(b.cur_origin.code(), b.channel))
            .then(a.prev_sum_ms.total_cmp(&b.prev_sum_ms))
            .then(a.prev_age_ms.total_cmp(&b.prev_age_ms))
    });
    for column in rows.chunk_by_mut(|a, b| (a.cur_origin, a.channel) == (b.cur_origin, b.channel)) {
        let mut best_below = f64::NEG_INFINITY;
        let mut i = 0;
        while i < column.len() {
            // rows sharing a previous cycle are compared only with smaller ones
            let j = i + column[i..]
                .iter()
                .take_while(|r| r.prev_sum_ms == column[i].prev_sum_ms)
                .count();
            let mut group_max = f64::NEG_INFINITY;
            for r in &mut column[i..j] {
                r.violation = r.wait_ms < best_below;
                group_max = group_max.max(r.wait_ms);
            }
            best_below = best_below.max(group_max);
            i = j;
        }
    }
    rows
}

/// Number of rows of [`threshold_report`] breaking monotonicity.
pub fn threshold_violations(policy: &StationaryDeterministicPolicy, model: &AopModel) -> usize {
    threshold_report(policy, model)
        .iter()
        .filter(|r| r.violation)
        .count()
}

/// Writes [`threshold_report`] as CSV.
pub fn write_threshold_report<W: Write>(
    writer: W,
    policy: &StationaryDeterministicPolicy,
    model: &AopModel,
) -> Result<(), SolverError> {
    let mut w = csv::Writer::from_writer(writer);
    for row in threshold_report(policy, model) {
        w.serialize(row).map_err(table_err)?;
    }
    w.flush()
        .map_err(|e| SolverError::PolicyTable(e.to_string()))
}
