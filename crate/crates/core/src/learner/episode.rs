use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::app_model::{ActionSpec, FunctionId, FunctionTable, GuiState};
use crate::encoder::StateKey;
use crate::error::{Error, Result};

/// Default maximum sequence length.
pub const DEFAULT_MAX_LEN: usize = 64;

/// Globally unique sequence identity: producing session plus a per-session counter.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SequenceId {
    pub session: String,
    pub seq_no: u64,
}

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.session, self.seq_no)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStep {
    pub state: GuiState,
    pub state_key: StateKey,
    pub action: ActionSpec,
    pub covered: BTreeSet<FunctionId>,
    pub next_state_key: StateKey,
}

/// `<s0, a0, F0, ..., s_t, a_t, F_t, s_{t+1}>`, at most `max_len` steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSequence {
    pub id: SequenceId,
    pub steps: Vec<EpisodeStep>,
    /// `s_{t+1}` of the last step; `None` while empty.
    pub terminal_state: Option<GuiState>,
    pub max_len: usize,
    #[serde(default)]
    pub sealed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordOutcome {
    Open,
    Sealed,
}

impl EpisodeSequence {
    pub fn new(id: SequenceId, max_len: usize) -> Self {
        EpisodeSequence {
            id,
            steps: Vec::new(),
            terminal_state: None,
            max_len,
            sealed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `s_{t+1}` for step `t`.
    pub fn next_state(&self, t: usize) -> Option<&GuiState> {
        if t + 1 < self.steps.len() {
            Some(&self.steps[t + 1].state)
        } else if t + 1 == self.steps.len() {
            self.terminal_state.as_ref()
        } else {
            None
        }
    }

    /// Appends one step. Returns [`RecordOutcome::Sealed`] once the sequence
    /// reaches its maximum length.
    pub fn record_step(
        &mut self,
        state: GuiState,
        action: ActionSpec,
        covered: BTreeSet<FunctionId>,
        next_state: GuiState,
    ) -> Result<RecordOutcome> {
        if self.sealed {
            return Err(Error::Sealed);
        }
        let state_key = StateKey::of(&state);
        if let Some(last) = self.steps.last() {
            if last.next_state_key != state_key {
                return Err(Error::ChainBreak {
                    index: self.steps.len(),
                });
            }
        }
        let next_state_key = StateKey::of(&next_state);
        self.steps.push(EpisodeStep {
            state,
            state_key,
            action,
            covered,
            next_state_key,
        });
        self.terminal_state = Some(next_state);
        if self.steps.len() >= self.max_len {
            self.sealed = true;
            Ok(RecordOutcome::Sealed)
        } else {
            Ok(RecordOutcome::Open)
        }
    }

    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Checks the sequence invariants; the error names the first bad step.
    pub fn validate(&self, table: Option<&FunctionTable>) -> Result<()> {
        if self.max_len == 0 || self.steps.len() > self.max_len {
            return Err(Error::Validation(format!(
                "sequence {} has {} steps, max_len {}",
                self.id,
                self.steps.len(),
                self.max_len
            )));
        }
        for (t, step) in self.steps.iter().enumerate() {
            if StateKey::of(&step.state) != step.state_key {
                return Err(Error::Validation(format!("step {t}: state_key does not match state")));
            }
            if let Some(next) = self.steps.get(t + 1) {
                if next.state_key != step.next_state_key {
                    return Err(Error::ChainBreak { index: t + 1 });
                }
            }
            if let Some(table) = table {
                if let Some(f) = step.covered.iter().find(|f| !table.contains(**f)) {
                    return Err(Error::Validation(format!("step {t}: unknown function {f}")));
                }
            }
        }
        match (self.steps.last(), &self.terminal_state) {
            (None, _) => Ok(()),
            (Some(last), Some(term)) if StateKey::of(term) == last.next_state_key => Ok(()),
            (Some(_), Some(_)) => Err(Error::ChainBreak {
                index: self.steps.len(),
            }),
            (Some(_), None) => Err(Error::Validation("missing terminal state".into())),
        }
    }
}
