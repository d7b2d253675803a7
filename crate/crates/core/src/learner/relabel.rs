use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::reward::classify_reward;
use super::{EpisodeSequence, SequenceId, TrainerConfig};
use crate::app_model::{actions_for_widgets, ActionSpec, FunctionId, GuiState};
use crate::error::Result;

/// `(g, s, a, r, s', d)` plus the actions available in `s'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub source: SequenceId,
    pub step: usize,
    pub goal: FunctionId,
    pub state: GuiState,
    pub action: ActionSpec,
    pub reward: f64,
    pub next_state: GuiState,
    pub done: bool,
    pub next_candidates: Vec<ActionSpec>,
}

/// `⋃_{j >= t} F_j` for every step, as sorted lists.
pub fn future_coverage(seq: &EpisodeSequence) -> Vec<Vec<FunctionId>> {
    let mut acc: BTreeSet<FunctionId> = BTreeSet::new();
    let mut out = vec![Vec::new(); seq.len()];
    for t in (0..seq.len()).rev() {
        acc.extend(seq.steps[t].covered.iter().copied());
        out[t] = acc.iter().copied().collect();
    }
    out
}

/// Hindsight relabeling: for every step, `K` goals drawn uniformly from the
/// functions covered at or after that step. Steps with no future coverage
/// are skipped.
pub fn relabel<R: Rng + ?Sized>(
    seq: &EpisodeSequence,
    cfg: &TrainerConfig,
    rng: &mut R,
) -> Result<Vec<TrainingTuple>> {
    let future = future_coverage(seq);
    let mut out = Vec::new();
    for (t, support) in future.iter().enumerate() {
        if support.is_empty() {
            continue;
        }
        let step = &seq.steps[t];
        let next_state = seq.next_state(t).expect("validated sequence has s_{t+1}");
        let next_candidates = actions_for_widgets(&next_state.widgets);
        for _ in 0..cfg.relabel_k {
            let goal = support[rng.gen_range(0..support.len())];
            let case = classify_reward(seq, t, goal)?;
            out.push(TrainingTuple {
                source: seq.id.clone(),
                step: t,
                goal,
                state: step.state.clone(),
                action: step.action.clone(),
                reward: case.reward(cfg.gamma),
                next_state: next_state.clone(),
                done: case.done(),
                next_candidates: next_candidates.clone(),
            });
        }
    }
    Ok(out)
}
