//! Stepwise validation of a child-label sequence against one content model,
//! with punctuation: registered label sets report the earliest moment at
//! which none of their labels can occur anymore.

use std::collections::BTreeSet;

use thiserror::Error;

use super::glushkov::Glushkov;

/// A registered label set together with its per-state "all past" table.
#[derive(Debug, Clone)]
pub struct PastTable {
    pub set: BTreeSet<String>,
    per_state: Vec<bool>,
}

impl PastTable {
    pub fn new(g: &Glushkov, set: BTreeSet<String>) -> PastTable {
        let per_state = g.past_table(&set);
        PastTable { set, per_state }
    }

    pub fn holds_at(&self, state: usize) -> bool {
        self.per_state[state]
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ValidationStepError {
    #[error("element `{child}` not allowed here by content model of `{parent}`")]
    InvalidChild { parent: String, child: String },
    #[error("content of `{parent}` ends prematurely (incomplete per its content model)")]
    Incomplete { parent: String },
    #[error("content model of `{parent}` is not one-unambiguous; cannot validate")]
    Ambiguous { parent: String },
}

/// Tracks one element's children as their labels stream past.
///
/// `step` reports which registered tables became satisfied by that child —
/// table truth is monotone along a run, so each fires at most once; tables
/// already true before the first child are reported by [`ValidatorState::start`].
#[derive(Debug, Clone)]
pub struct ValidatorState {
    state: usize,
    fired: Vec<bool>,
}

impl ValidatorState {
    /// Initial state plus the tables that hold before any child is read.
    pub fn start(tables: &[PastTable]) -> (ValidatorState, Vec<usize>) {
        let mut fired = vec![false; tables.len()];
        let mut now = Vec::new();
        for (i, t) in tables.iter().enumerate() {
            if t.holds_at(0) {
                fired[i] = true;
                now.push(i);
            }
        }
        (ValidatorState { state: 0, fired }, now)
    }

    pub fn state(&self) -> usize {
        self.state
    }

    /// Advance over one child label; returns indices of tables that just
    /// became satisfied, in registration order.
    pub fn step(
        &mut self,
        parent: &str,
        g: &Glushkov,
        tables: &[PastTable],
        child: &str,
    ) -> Result<Vec<usize>, ValidationStepError> {
        let targets = g.targets(self.state, child);
        let next = match targets {
            [] => {
                return Err(ValidationStepError::InvalidChild {
                    parent: parent.to_string(),
                    child: child.to_string(),
                })
            }
            [t] => *t,
            _ => {
                return Err(ValidationStepError::Ambiguous {
                    parent: parent.to_string(),
                })
            }
        };
        let old = self.state;
        self.state = next;
        let mut now = Vec::new();
        for (i, t) in tables.iter().enumerate() {
            if !self.fired[i] && t.holds_at(next) && !t.holds_at(old) {
                self.fired[i] = true;
                now.push(i);
            }
        }
        Ok(now)
    }

    /// True when the table fired at some point (including position 0).
    pub fn has_fired(&self, table: usize) -> bool {
        self.fired[table]
    }

    /// Check that the children seen so far form a complete word.
    pub fn finish(&self, parent: &str, g: &Glushkov) -> Result<(), ValidationStepError> {
        if g.is_final(self.state) {
            Ok(())
        } else {
            Err(ValidationStepError::Incomplete {
                parent: parent.to_string(),
            })
        }
    }
}
