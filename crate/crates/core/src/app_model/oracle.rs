//! Optimistic shortest-trigger distances.
//!
//! An outcome is traversable when its probability is maximal within its
//! transition. Distances count actions from a fresh launch at the entry.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ActionSpec, AppModel, Destination, FunctionId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TriggerDistance {
    Steps(usize),
    Unreachable,
}

impl TriggerDistance {
    pub fn steps(self) -> Option<usize> {
        match self {
            TriggerDistance::Steps(n) => Some(n),
            TriggerDistance::Unreachable => None,
        }
    }
}

impl fmt::Display for TriggerDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TriggerDistance::Steps(n) => write!(f, "{n}"),
            TriggerDistance::Unreachable => f.write_str("UNREACHABLE"),
        }
    }
}

/// One step of a witness path: the screen acted on, the action, and the
/// index of the traversed outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriggerWitness {
    pub steps: Vec<(String, ActionSpec, usize)>,
}

impl AppModel {
    fn traversable_outcomes(&self, ti: usize) -> impl Iterator<Item = usize> + '_ {
        let outcomes = &self.transitions[ti].outcomes;
        let best = outcomes
            .iter()
            .map(|o| o.probability.as_f64())
            .fold(0.0f64, f64::max);
        outcomes
            .iter()
            .enumerate()
            .filter(move |(_, o)| o.probability.as_f64() == best)
            .map(|(i, _)| i)
    }

    fn outcome_dest(&self, to: &Destination) -> usize {
        match to {
            Destination::Exit => self.screen_idx(&self.entry_screen).unwrap(),
            Destination::Screen(s) => self.screen_idx(s).unwrap(),
        }
    }

    /// BFS over traversable outcomes; returns per-screen (distance, parent link).
    fn trigger_bfs(&self) -> Vec<Option<(usize, Option<(usize, usize, usize)>)>> {
        let entry = self.screen_idx(&self.entry_screen).unwrap();
        let mut by_screen = vec![Vec::new(); self.screens.len()];
        for (ti, t) in self.transitions.iter().enumerate() {
            by_screen[self.screen_idx(&t.from_screen).unwrap()].push(ti);
        }
        let mut seen: Vec<Option<(usize, Option<(usize, usize, usize)>)>> =
            vec![None; self.screens.len()];
        seen[entry] = Some((0, None));
        let mut queue = VecDeque::from([entry]);
        while let Some(s) = queue.pop_front() {
            let d = seen[s].unwrap().0;
            for &ti in &by_screen[s] {
                for oi in self.traversable_outcomes(ti) {
                    let n = self.outcome_dest(&self.transitions[ti].outcomes[oi].to_screen);
                    if seen[n].is_none() {
                        seen[n] = Some((d + 1, Some((s, ti, oi))));
                        queue.push_back(n);
                    }
                }
            }
        }
        seen
    }

    pub fn shortest_trigger_distance(&self, function_id: FunctionId) -> Result<TriggerDistance> {
        Ok(match self.trigger_witness(function_id)? {
            Some(w) => TriggerDistance::Steps(w.steps.len()),
            None => TriggerDistance::Unreachable,
        })
    }

    /// A minimal-length action path from the entry whose last step covers
    /// `function_id`, or `None` when unreachable.
    pub fn trigger_witness(&self, function_id: FunctionId) -> Result<Option<TriggerWitness>> {
        if !self.function_table.contains(function_id) {
            return Err(Error::UnknownFunction(function_id));
        }
        let seen = self.trigger_bfs();
        let mut best: Option<(usize, usize, usize)> = None;
        for (ti, t) in self.transitions.iter().enumerate() {
            let from = self.screen_idx(&t.from_screen).unwrap();
            let Some((d, _)) = seen[from] else { continue };
            for oi in self.traversable_outcomes(ti) {
                if t.outcomes[oi].covered_functions.contains(&function_id)
                    && best.is_none_or(|(bd, _, _)| d + 1 < bd)
                {
                    best = Some((d + 1, ti, oi));
                }
            }
        }
        let Some((_, ti, oi)) = best else {
            return Ok(None);
        };
        let mut steps = vec![(
            self.transitions[ti].from_screen.clone(),
            self.transitions[ti].action.clone(),
            oi,
        )];
        let mut cur = self.screen_idx(&self.transitions[ti].from_screen).unwrap();
        while let Some((_, Some((prev, pti, poi)))) = seen[cur] {
            steps.push((
                self.screens[prev].screen_id.clone(),
                self.transitions[pti].action.clone(),
                poi,
            ));
            cur = prev;
        }
        steps.reverse();
        Ok(Some(TriggerWitness { steps }))
    }

    /// Optimistic distances for every function in the table.
    pub fn trigger_distances(&self) -> Vec<(FunctionId, TriggerDistance)> {
        self.function_table
            .ids()
            .map(|f| (f, self.shortest_trigger_distance(f).unwrap()))
            .collect()
    }
}
