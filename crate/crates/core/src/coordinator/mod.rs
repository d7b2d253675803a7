//! Device sessions, the worker interfaces, and guided exploration.

mod guided;
mod net;
pub mod protocol;
mod session;
mod worker;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::app_model::{actions_for_widgets, ActionSpec, FunctionId, GuiState};
use crate::encoder::Featurizer;
use crate::error::{Error, Result};
use crate::qnet::{argmax, MlpParams, SparseVec};

pub use guided::{
    guided_explore, DirectedEvent, DirectedReport, DirectedRunConfig, Policy, TargetResult,
};
pub use net::{serve, RemoteTransport, ServerHandle};
pub use protocol::WireMessage;
pub use session::{
    run_session, train_in_process, DeviceSession, SessionStats, SessionStep, TrainObserver,
    TrainingRunConfig, DEFAULT_REFRESH_INTERVAL,
};
pub use worker::{with_retry, LocalTransport, Transport, Worker, WorkerStats};

/// Linear ε decay by global action count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub eps_start: f64,
    pub eps_end: f64,
    pub decay_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            eps_start: 1.0,
            eps_end: 0.05,
            decay_steps: 50_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn constant(eps: f64) -> Self {
        EpsilonSchedule {
            eps_start: eps,
            eps_end: eps,
            decay_steps: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon schedule needs 0 <= end ({}) <= start ({}) <= 1",
                self.eps_end, self.eps_start
            )));
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn at(&self, action_count: u64) -> f64 {
        if action_count >= self.decay_steps {
            return self.eps_end;
        }
        let frac = action_count as f64 / self.decay_steps as f64;
        self.eps_start + (self.eps_end - self.eps_start) * frac
    }
}

/// ε-greedy choice among `n` candidates. `q` is only evaluated when the
/// greedy branch is taken; ties go to the lowest index.
pub fn select_action<R, F>(n: usize, epsilon: f64, rng: &mut R, q: F) -> Result<usize>
where
    R: Rng + ?Sized,
    F: FnOnce() -> Result<Vec<f64>>,
{
    if n == 0 {
        return Err(Error::EmptyCandidates);
    }
    if n == 1 {
        return Ok(0);
    }
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return Ok(rng.gen_range(0..n));
    }
    let values = q()?;
    if values.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: values.len(),
        });
    }
    Ok(argmax(&values).expect("non-empty"))
}

/// Round-robin partition of `targets` over `devices`, preserving order.
pub fn assign_goals<D: Clone + Ord, T: Clone>(
    devices: &[D],
    targets: &[T],
) -> Result<BTreeMap<D, Vec<T>>> {
    if devices.is_empty() {
        return Err(Error::Config("no devices to assign goals to".into()));
    }
    let mut out: BTreeMap<D, Vec<T>> = devices.iter().map(|d| (d.clone(), Vec::new())).collect();
    for (i, t) in targets.iter().enumerate() {
        out.get_mut(&devices[i % devices.len()])
            .unwrap()
            .push(t.clone());
    }
    Ok(out)
}

struct EncodedState {
    state: SparseVec,
    actions: Vec<SparseVec>,
}

/// Q-value evaluation with per-state and per-goal encoding caches.
pub struct QEvaluator {
    featurizer: Arc<dyn Featurizer>,
    states: HashMap<GuiState, Arc<EncodedState>>,
    goals: HashMap<FunctionId, Arc<SparseVec>>,
}

const EVAL_CACHE_LIMIT: usize = 50_000;

impl QEvaluator {
    pub fn new(featurizer: Arc<dyn Featurizer>) -> Self {
        QEvaluator {
            featurizer,
            states: HashMap::new(),
            goals: HashMap::new(),
        }
    }

    pub fn featurizer(&self) -> &Arc<dyn Featurizer> {
        &self.featurizer
    }

    fn encoded(&mut self, state: &GuiState) -> Result<Arc<EncodedState>> {
        if let Some(e) = self.states.get(state) {
            return Ok(e.clone());
        }
        if self.states.len() >= EVAL_CACHE_LIMIT {
            self.states.clear();
        }
        let actions = actions_for_widgets(&state.widgets)
            .iter()
            .map(|a| self.featurizer.action(a, &state.widgets))
            .collect::<Result<Vec<_>>>()?;
        let e = Arc::new(EncodedState {
            state: self.featurizer.state(state),
            actions,
        });
        self.states.insert(state.clone(), e.clone());
        Ok(e)
    }

    fn goal(&mut self, goal: FunctionId) -> Result<Arc<SparseVec>> {
        if let Some(g) = self.goals.get(&goal) {
            return Ok(g.clone());
        }
        let g = Arc::new(self.featurizer.goal(goal)?);
        self.goals.insert(goal, g.clone());
        Ok(g)
    }

    fn check(&self, params: &MlpParams) -> Result<()> {
        if params.input_dim() != self.featurizer.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.featurizer.input_dim(),
                actual: params.input_dim(),
            });
        }
        Ok(())
    }

    /// Q over the enumerated actions of `state`, in enumeration order.
    pub fn q_values(
        &mut self,
        params: &MlpParams,
        state: &GuiState,
        goal: FunctionId,
    ) -> Result<Vec<f64>> {
        self.check(params)?;
        let e = self.encoded(state)?;
        let g = self.goal(goal)?;
        Ok(params.q_candidates(&[&e.state, &g], &e.actions))
    }

    /// Q over an explicit candidate list.
    pub fn q_values_for(
        &mut self,
        params: &MlpParams,
        state: &GuiState,
        candidates: &[ActionSpec],
        goal: FunctionId,
    ) -> Result<Vec<f64>> {
        self.check(params)?;
        let s = self.featurizer.state(state);
        let g = self.goal(goal)?;
        let acts = candidates
            .iter()
            .map(|a| self.featurizer.action(a, &state.widgets))
            .collect::<Result<Vec<_>>>()?;
        Ok(params.q_candidates(&[&s, &g], &acts))
    }
}
