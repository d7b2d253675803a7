use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{select_action, QEvaluator};
use crate::app_model::{ActionSpec, AppModel, FunctionId};
use crate::encoder::StateKey;
use crate::error::{Error, Result};
use crate::qnet::MlpParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectedRunConfig {
    pub max_directed_steps: usize,
    pub event_budget: usize,
    pub epsilon: f64,
    /// Force one random action after this many consecutive unchanged states.
    pub loop_escape: Option<usize>,
}

impl Default for DirectedRunConfig {
    fn default() -> Self {
        DirectedRunConfig {
            max_directed_steps: 200,
            event_budget: 1_000,
            epsilon: 0.0,
            loop_escape: None,
        }
    }
}

impl DirectedRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_directed_steps == 0 {
            return Err(Error::Config("max_directed_steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.loop_escape == Some(0) {
            return Err(Error::Config("loop_escape must be positive".into()));
        }
        Ok(())
    }
}

/// How directed steps pick actions.
pub enum Policy<'a> {
    /// Highest Q under the target goal (ε per run config).
    Greedy {
        params: &'a MlpParams,
        q: &'a mut QEvaluator,
    },
    /// Uniformly random actions.
    Random,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetResult {
    pub function_id: FunctionId,
    pub covered: bool,
    /// 1-based index of the event that first covered the function, or the
    /// directed steps spent on it when it was never covered.
    pub events_used: usize,
    /// Steps taken while this was the active target.
    pub directed_steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectedReport {
    pub targets: Vec<TargetResult>,
    pub total_events: usize,
    pub loop_escapes: usize,
}

impl DirectedReport {
    pub fn covered_count(&self) -> usize {
        self.targets.iter().filter(|t| t.covered).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectedEvent {
    pub index: usize,
    pub target: FunctionId,
    pub screen: String,
    pub action: ActionSpec,
    pub covered: Vec<FunctionId>,
    pub exited: bool,
    pub forced: bool,
}

/// Walks `targets` in order from a fresh launch. Each target gets steps
/// until it is covered, `max_directed_steps` is hit, or the total budget is
/// spent; targets covered earlier along the way take no directed steps.
pub fn guided_explore<R: Rng + ?Sized>(
    env: &AppModel,
    policy: &mut Policy<'_>,
    targets: &[FunctionId],
    cfg: &DirectedRunConfig,
    rng: &mut R,
    on_event: &mut dyn FnMut(&DirectedEvent),
) -> Result<DirectedReport> {
    cfg.validate()?;
    for t in targets {
        if !env.function_table.contains(*t) {
            return Err(Error::UnknownFunction(*t));
        }
    }
    let mut state = env.entry_state();
    let mut covered_at: HashMap<FunctionId, usize> = HashMap::new();
    let mut report = DirectedReport::default();
    for &target in targets {
        if let Some(&at) = covered_at.get(&target) {
            report.targets.push(TargetResult {
                function_id: target,
                covered: true,
                events_used: at,
                directed_steps: 0,
            });
            continue;
        }
        let mut used = 0;
        let mut repeats = 0usize;
        let mut last_key = StateKey::of(&state);
        while used < cfg.max_directed_steps && report.total_events < cfg.event_budget {
            let candidates = env.enumerate_actions(&state)?;
            let forced = cfg.loop_escape.is_some_and(|k| repeats >= k);
            let idx = if forced {
                repeats = 0;
                report.loop_escapes += 1;
                log::debug!("loop escape on {} for target {target}", state.screen_id);
                rng.gen_range(0..candidates.len())
            } else {
                match policy {
                    Policy::Random => rng.gen_range(0..candidates.len()),
                    Policy::Greedy { params, q } => {
                        select_action(candidates.len(), cfg.epsilon, rng, || {
                            q.q_values(params, &state, target)
                        })?
                    }
                }
            };
            let action = candidates[idx].clone();
            let r = env.step(&state, &action, rng)?;
            report.total_events += 1;
            used += 1;
            for f in &r.covered {
                covered_at.entry(*f).or_insert(report.total_events);
            }
            on_event(&DirectedEvent {
                index: report.total_events,
                target,
                screen: state.screen_id.clone(),
                action,
                covered: r.covered.iter().copied().collect(),
                exited: r.exited,
                forced,
            });
            state = r.next;
            let key = StateKey::of(&state);
            repeats = if key == last_key { repeats + 1 } else { 0 };
            last_key = key;
            if r.covered.contains(&target) {
                break;
            }
        }
        report.targets.push(TargetResult {
            function_id: target,
            covered: covered_at.contains_key(&target),
            events_used: covered_at.get(&target).copied().unwrap_or(used),
            directed_steps: used,
        });
    }
    Ok(report)
}
