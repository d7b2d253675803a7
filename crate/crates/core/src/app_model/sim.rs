use std::collections::BTreeSet;

use rand::Rng;

use super::{lcm_u128, ActionSpec, AppModel, Destination, EventKind, FunctionId, GuiState, Widget};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepResult {
    pub next: GuiState,
    pub covered: BTreeSet<FunctionId>,
    pub exited: bool,
}

/// Actions available on a widget list: widget index ascending, then event
/// kind by name, then the screen-level back.
pub fn actions_for_widgets(widgets: &[Widget]) -> Vec<ActionSpec> {
    let mut out = Vec::new();
    for (i, w) in widgets.iter().enumerate() {
        let mut kinds: Vec<EventKind> = w
            .supported_events
            .iter()
            .copied()
            .filter(|k| *k != EventKind::Back)
            .collect();
        kinds.sort_by_key(|k| k.as_str());
        kinds.dedup();
        out.extend(kinds.into_iter().map(|k| ActionSpec::on_widget(k, i)));
    }
    out.push(ActionSpec::back());
    out
}

impl AppModel {
    pub fn enumerate_actions(&self, state: &GuiState) -> Result<Vec<ActionSpec>> {
        let screen = self.screen(&state.screen_id)?;
        Ok(actions_for_widgets(&screen.widgets))
    }

    /// Executes `action` in `state`. Undeclared pairs are inert self-loops;
    /// EXIT outcomes relaunch the app at its entry screen.
    pub fn step<R: Rng + ?Sized>(
        &self,
        state: &GuiState,
        action: &ActionSpec,
        rng: &mut R,
    ) -> Result<StepResult> {
        let idx = self.screen_idx(&state.screen_id)?;
        self.check_action(&self.screens[idx], action)?;
        let Some(transition) = self.transition_for(idx, action.key()) else {
            return Ok(StepResult {
                next: state.clone(),
                covered: BTreeSet::new(),
                exited: false,
            });
        };
        let outcome = if transition.outcomes.len() == 1 {
            &transition.outcomes[0]
        } else {
            let lcm = transition
                .outcomes
                .iter()
                .fold(1u128, |acc, o| lcm_u128(acc, o.probability.den as u128));
            let draw = rng.gen_range(0..lcm);
            let mut acc = 0u128;
            let mut chosen = transition.outcomes.last().unwrap();
            for o in &transition.outcomes {
                acc += o.probability.num as u128 * (lcm / o.probability.den as u128);
                if draw < acc {
                    chosen = o;
                    break;
                }
            }
            chosen
        };
        let (next, exited) = match &outcome.to_screen {
            Destination::Exit => (self.entry_state(), true),
            Destination::Screen(to) => (super::GuiState::from_screen(self.screen(to)?), false),
        };
        Ok(StepResult {
            next,
            covered: outcome.covered_functions.clone(),
            exited,
        })
    }
}
