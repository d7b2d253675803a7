use crate::app_model::FunctionId;
use crate::error::{Error, Result};

use super::EpisodeSequence;

pub const REWARD_TRIGGER: f64 = 1.0;
pub const REWARD_NO_CHANGE: f64 = -0.001;
pub const REWARD_OTHER: f64 = -0.0001;
pub const REWARD_SOON_SCALE: f64 = 0.01;

/// Which reward rule fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardCase {
    /// The action covered the goal.
    Triggered,
    /// The screen did not change.
    NoChange,
    /// The goal is covered `n` steps later.
    TriggeredWithin(usize),
    Other,
}

impl RewardCase {
    pub fn reward(self, gamma: f64) -> f64 {
        match self {
            RewardCase::Triggered => REWARD_TRIGGER,
            RewardCase::NoChange => REWARD_NO_CHANGE,
            RewardCase::TriggeredWithin(n) => REWARD_SOON_SCALE * gamma.powi(n as i32),
            RewardCase::Other => REWARD_OTHER,
        }
    }

    pub fn done(self) -> bool {
        matches!(self, RewardCase::Triggered)
    }
}

/// Classifies step `t` of `seq` for goal `goal`, in priority order
/// triggered > no change > triggered later > other.
pub fn classify_reward(seq: &EpisodeSequence, t: usize, goal: FunctionId) -> Result<RewardCase> {
    let step = seq.steps.get(t).ok_or_else(|| {
        Error::Validation(format!("step index {t} out of range for {} steps", seq.len()))
    })?;
    if step.covered.contains(&goal) {
        return Ok(RewardCase::Triggered);
    }
    if step.state_key == step.next_state_key {
        return Ok(RewardCase::NoChange);
    }
    if let Some(n) = seq.steps[t + 1..]
        .iter()
        .position(|s| s.covered.contains(&goal))
    {
        return Ok(RewardCase::TriggeredWithin(n + 1));
    }
    Ok(RewardCase::Other)
}

/// `(r, d)` for step `t` under goal `goal`.
pub fn compute_reward(
    seq: &EpisodeSequence,
    t: usize,
    goal: FunctionId,
    gamma: f64,
) -> Result<(f64, bool)> {
    let case = classify_reward(seq, t, goal)?;
    Ok((case.reward(gamma), case.done()))
}
