use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::worker::{with_retry, Transport};
use super::{select_action, EpsilonSchedule, QEvaluator};
use crate::app_model::{ActionSpec, AppModel, FunctionId, GuiState};
use crate::encoder::Featurizer;
use crate::error::{Error, Result};
use crate::learner::{
    CheckpointSink, EpisodeSequence, ModelSnapshot, ModelStore, RecordOutcome, SequenceId,
    StepStats, Trainer, TrainerSummary,
};

pub const DEFAULT_REFRESH_INTERVAL: u64 = 100;

const RETRY_ATTEMPTS: usize = 3;
const RETRY_BASE: Duration = Duration::from_millis(20);

/// What one session action did.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionStep {
    /// 0-based action index within the session.
    pub index: u64,
    pub screen: String,
    pub action: ActionSpec,
    pub covered: BTreeSet<FunctionId>,
    pub exited: bool,
    pub goal: FunctionId,
    pub goal_triggered: bool,
    pub epsilon: f64,
    pub model_version: u64,
    /// A sequence closed by this action (sealed or goal reached).
    pub submitted: Option<EpisodeSequence>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub session_id: String,
    pub actions: u64,
    pub sequences: u64,
    pub steps_submitted: u64,
    pub goal_triggers: u64,
    pub model_version: u64,
}

/// One simulated device exploring under a goal.
pub struct DeviceSession {
    id: String,
    env: Arc<AppModel>,
    q: QEvaluator,
    goals: Vec<FunctionId>,
    state: GuiState,
    seq: EpisodeSequence,
    next_seq_no: u64,
    goal: FunctionId,
    snapshot: Arc<ModelSnapshot>,
    refresh_interval: u64,
    max_len: usize,
    rng: ChaCha8Rng,
    stats: SessionStats,
}

impl DeviceSession {
    pub fn new(
        id: impl Into<String>,
        env: Arc<AppModel>,
        featurizer: Arc<dyn Featurizer>,
        snapshot: Arc<ModelSnapshot>,
        max_len: usize,
        refresh_interval: u64,
        seed: u64,
    ) -> Result<Self> {
        let id = id.into();
        let goals: Vec<FunctionId> = env.function_table.ids().collect();
        if goals.is_empty() {
            return Err(Error::Validation("app has no functions to target".into()));
        }
        if max_len == 0 || refresh_interval == 0 {
            return Err(Error::Config("max_len and refresh interval must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let goal = goals[rng.gen_range(0..goals.len())];
        Ok(DeviceSession {
            seq: EpisodeSequence::new(
                SequenceId {
                    session: id.clone(),
                    seq_no: 0,
                },
                max_len,
            ),
            stats: SessionStats {
                session_id: id.clone(),
                model_version: snapshot.version,
                ..Default::default()
            },
            id,
            state: env.entry_state(),
            q: QEvaluator::new(featurizer),
            env,
            goals,
            next_seq_no: 1,
            goal,
            snapshot,
            refresh_interval,
            max_len,
            rng,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> &GuiState {
        &self.state
    }

    pub fn goal(&self) -> FunctionId {
        self.goal
    }

    pub fn model_version(&self) -> u64 {
        self.snapshot.version
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    /// Due for a model refresh before the next action.
    pub fn needs_refresh(&self) -> bool {
        self.stats.actions.is_multiple_of(self.refresh_interval)
    }

    /// Installs `snap` if it is newer than the current snapshot.
    pub fn refresh(&mut self, snap: Arc<ModelSnapshot>) {
        if snap.version > self.snapshot.version {
            self.stats.model_version = snap.version;
            self.snapshot = snap;
        }
    }

    fn take_sequence(&mut self) -> EpisodeSequence {
        let fresh = EpisodeSequence::new(
            SequenceId {
                session: self.id.clone(),
                seq_no: self.next_seq_no,
            },
            self.max_len,
        );
        self.next_seq_no += 1;
        let mut seq = std::mem::replace(&mut self.seq, fresh);
        seq.seal();
        self.stats.sequences += 1;
        self.stats.steps_submitted += seq.len() as u64;
        seq
    }

    /// One ε-greedy action. A sequence closed by the action is returned in
    /// [`SessionStep::submitted`]; the goal is then resampled.
    pub fn act(&mut self, epsilon: f64) -> Result<SessionStep> {
        let candidates = self.env.enumerate_actions(&self.state)?;
        let snapshot = self.snapshot.clone();
        let (q, state, goal) = (&mut self.q, &self.state, self.goal);
        let idx = select_action(candidates.len(), epsilon, &mut self.rng, || {
            q.q_values(&snapshot.params, state, goal)
        })?;
        let action = candidates[idx].clone();
        let r = self.env.step(&self.state, &action, &mut self.rng)?;
        let screen = self.state.screen_id.clone();
        let prev = std::mem::replace(&mut self.state, r.next.clone());
        let outcome = self
            .seq
            .record_step(prev, action.clone(), r.covered.clone(), r.next)?;
        let goal_triggered = r.covered.contains(&goal);
        let submitted = if goal_triggered || outcome == RecordOutcome::Sealed {
            self.goal = self.goals[self.rng.gen_range(0..self.goals.len())];
            Some(self.take_sequence())
        } else {
            None
        };
        let step = SessionStep {
            index: self.stats.actions,
            screen,
            action,
            covered: r.covered,
            exited: r.exited,
            goal,
            goal_triggered,
            epsilon,
            model_version: self.snapshot.version,
            submitted,
        };
        self.stats.actions += 1;
        self.stats.goal_triggers += goal_triggered as u64;
        Ok(step)
    }

    /// Closes the open sequence, if it has any steps.
    pub fn flush(&mut self) -> Option<EpisodeSequence> {
        if self.seq.is_empty() {
            return None;
        }
        Some(self.take_sequence())
    }
}

/// Drives `session` for `actions` actions against a worker. ε follows
/// `schedule` over the shared `global` action counter.
pub fn run_session(
    session: &mut DeviceSession,
    transport: &mut dyn Transport,
    actions: u64,
    schedule: &EpsilonSchedule,
    global: &AtomicU64,
) -> Result<SessionStats> {
    for _ in 0..actions {
        if session.needs_refresh() {
            let have = session.model_version();
            if let Some(snap) = with_retry(RETRY_ATTEMPTS, RETRY_BASE, || transport.get_model(have))? {
                session.refresh(snap);
            }
        }
        let eps = schedule.at(global.fetch_add(1, Ordering::Relaxed));
        if let Some(seq) = session.act(eps)?.submitted {
            with_retry(RETRY_ATTEMPTS, RETRY_BASE, || transport.add_training_data(&seq))?;
        }
    }
    if let Some(seq) = session.flush() {
        with_retry(RETRY_ATTEMPTS, RETRY_BASE, || transport.add_training_data(&seq))?;
    }
    Ok(session.stats().clone())
}

/// Budget and pacing for a single-process training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingRunConfig {
    /// Environment actions summed over sessions.
    pub actions: u64,
    /// Sessions interleaved round-robin, one action each per turn.
    pub sessions: usize,
    /// Trainer steps per environment action once the buffer is warm.
    pub train_ratio: f64,
    pub epsilon: EpsilonSchedule,
    pub refresh_interval: u64,
    pub seed: u64,
}

impl Default for TrainingRunConfig {
    fn default() -> Self {
        TrainingRunConfig {
            actions: 20_000,
            sessions: 1,
            train_ratio: 0.25,
            epsilon: EpsilonSchedule::default(),
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            seed: 0,
        }
    }
}

impl TrainingRunConfig {
    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        if self.sessions == 0 || self.refresh_interval == 0 {
            return Err(Error::Config("sessions and refresh_interval must be positive".into()));
        }
        if !(self.train_ratio >= 0.0 && self.train_ratio.is_finite()) {
            return Err(Error::Config(format!("train_ratio {} must be >= 0", self.train_ratio)));
        }
        Ok(())
    }
}

/// Hooks for logging a training run.
pub trait TrainObserver {
    fn on_action(&mut self, _session: usize, _global_index: u64, _step: &SessionStep) -> Result<()> {
        Ok(())
    }

    fn on_train(&mut self, _stats: &StepStats, _model_version: u64) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs sessions and the trainer in one thread with a fixed interleaving, so
/// a seed fully determines the run.
pub fn train_in_process(
    env: Arc<AppModel>,
    featurizer: Arc<dyn Featurizer>,
    trainer: &mut Trainer,
    run: &TrainingRunConfig,
    sink: &mut dyn CheckpointSink,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainerSummary, Vec<SessionStats>)> {
    run.validate()?;
    let store = ModelStore::new(trainer.snapshot());
    let max_len = trainer.config().max_len;
    let mut sessions = (0..run.sessions)
        .map(|i| {
            DeviceSession::new(
                format!("d{i}"),
                env.clone(),
                featurizer.clone(),
                store.latest(),
                max_len,
                run.refresh_interval,
                run.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut credit = 0.0;
    for global in 0..run.actions {
        let i = (global % run.sessions as u64) as usize;
        let session = &mut sessions[i];
        if session.needs_refresh() {
            session.refresh(store.latest());
        }
        let step = session.act(run.epsilon.at(global))?;
        observer.on_action(i, global, &step)?;
        if let Some(seq) = &step.submitted {
            trainer.ingest(seq)?;
        }
        if trainer.ready() {
            credit += run.train_ratio;
            while credit >= 1.0 {
                credit -= 1.0;
                let stats = trainer.train_step()?;
                if stats.publish_due {
                    trainer.publish(&store, sink)?;
                }
                observer.on_train(&stats, trainer.model_version())?;
            }
        }
    }
    for s in &mut sessions {
        if let Some(seq) = s.flush() {
            trainer.ingest(&seq)?;
        }
    }
    if trainer.steps() > 0 && !trainer.steps().is_multiple_of(trainer.config().publish_interval) {
        trainer.publish(&store, sink)?;
    }
    Ok((
        trainer.summary(),
        sessions.iter().map(|s| s.stats().clone()).collect(),
    ))
}
