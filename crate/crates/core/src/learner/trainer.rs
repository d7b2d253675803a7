use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{relabel, EpisodeSequence, ReplayBuffer, SequenceId, TrainerConfig};
use crate::app_model::{FunctionId, GuiState};
use crate::encoder::{EncoderConfig, Featurizer};
use crate::error::{Error, Result};
use crate::qnet::{
    adam_step, double_dqn_target, loss_and_grads, save_checkpoint, sync_target, AdamState, Batch,
    Checkpoint, CheckpointMeta, MlpParams, SparseVec,
};

const PUBLISH_ATTEMPTS: usize = 3;
const STATE_CACHE_LIMIT: usize = 100_000;

/// An immutable published model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub version: u64,
    pub params: MlpParams,
}

/// Latest published snapshot, shared between the trainer and sessions.
#[derive(Clone, Debug)]
pub struct ModelStore {
    inner: Arc<RwLock<Arc<ModelSnapshot>>>,
}

impl ModelStore {
    pub fn new(initial: ModelSnapshot) -> Self {
        ModelStore {
            inner: Arc::new(RwLock::new(Arc::new(initial))),
        }
    }

    pub fn latest(&self) -> Arc<ModelSnapshot> {
        self.inner.read().unwrap().clone()
    }

    pub fn version(&self) -> u64 {
        self.inner.read().unwrap().version
    }

    /// Installs `snap` unless an equal or newer version is already present.
    pub fn publish(&self, snap: ModelSnapshot) -> bool {
        let mut guard = self.inner.write().unwrap();
        if snap.version <= guard.version {
            return false;
        }
        *guard = Arc::new(snap);
        true
    }
}

/// Destination for periodic checkpoints.
pub trait CheckpointSink: Send {
    fn save(&mut self, ckpt: &Checkpoint) -> Result<()>;
}

/// Discards checkpoints.
#[derive(Clone, Copy, Debug, Default)]
pub struct NullSink;

impl CheckpointSink for NullSink {
    fn save(&mut self, _ckpt: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

/// Writes each checkpoint atomically to a fixed path.
#[derive(Clone, Debug)]
pub struct DirSink {
    pub path: PathBuf,
    pub saved: u64,
}

impl DirSink {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DirSink {
            path: path.into(),
            saved: 0,
        }
    }
}

impl CheckpointSink for DirSink {
    fn save(&mut self, ckpt: &Checkpoint) -> Result<()> {
        save_checkpoint(ckpt, &self.path)?;
        self.saved += 1;
        Ok(())
    }
}

#[derive(Debug)]
struct EncodedState {
    state: SparseVec,
    actions: Vec<SparseVec>,
}

#[derive(Debug)]
struct Replayed {
    state: Arc<EncodedState>,
    action: SparseVec,
    goal: Arc<SparseVec>,
    reward: f64,
    done: bool,
    next: Arc<EncodedState>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub buffer_size: usize,
    pub synced: bool,
    /// The step landed on a publish boundary.
    pub publish_due: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainerSummary {
    pub steps: u64,
    pub syncs: u64,
    pub model_version: u64,
    pub sequences: usize,
    pub tuples: u64,
    pub checkpoints: u64,
}

/// Owns the networks, the optimizer, and the replay buffer.
pub struct Trainer {
    cfg: TrainerConfig,
    featurizer: Arc<dyn Featurizer>,
    encoder: EncoderConfig,
    app_fingerprint: String,
    pred: MlpParams,
    target: MlpParams,
    adam: AdamState,
    buffer: ReplayBuffer<Replayed>,
    rng: ChaCha8Rng,
    steps: u64,
    syncs: u64,
    model_version: u64,
    checkpoints: u64,
    state_cache: HashMap<GuiState, Arc<EncodedState>>,
    goal_cache: HashMap<FunctionId, Arc<SparseVec>>,
    ingested: BTreeMap<SequenceId, usize>,
    heat: BTreeMap<FunctionId, u64>,
}

impl Trainer {
    pub fn new(
        cfg: TrainerConfig,
        featurizer: Arc<dyn Featurizer>,
        encoder: EncoderConfig,
        app_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        cfg.validate()?;
        let pred = MlpParams::init(&cfg.layer_sizes(featurizer.input_dim()), cfg.seed)?;
        Ok(Trainer {
            target: pred.clone(),
            adam: AdamState::for_params(&pred, cfg.adam),
            buffer: ReplayBuffer::new(cfg.capacity)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e65_72),
            pred,
            cfg,
            featurizer,
            encoder,
            app_fingerprint: app_fingerprint.into(),
            steps: 0,
            syncs: 0,
            model_version: 0,
            checkpoints: 0,
            state_cache: HashMap::new(),
            goal_cache: HashMap::new(),
            ingested: BTreeMap::new(),
            heat: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn pred(&self) -> &MlpParams {
        &self.pred
    }

    pub fn target(&self) -> &MlpParams {
        &self.target
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn syncs(&self) -> u64 {
        self.syncs
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn buffer_pushed(&self) -> u64 {
        self.buffer.pushed()
    }

    pub fn buffer_evicted(&self) -> u64 {
        self.buffer.evicted()
    }

    /// Sequence id to number of steps, for every ingested sequence.
    pub fn ingested(&self) -> &BTreeMap<SequenceId, usize> {
        &self.ingested
    }

    /// Per-function trigger counts over every ingested step.
    pub fn heat(&self) -> &BTreeMap<FunctionId, u64> {
        &self.heat
    }

    pub fn ready(&self) -> bool {
        self.buffer.len() >= self.cfg.min_fill
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            version: self.model_version,
            params: self.pred.clone(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            pred: self.pred.clone(),
            target: self.target.clone(),
            adam: self.adam.clone(),
            encoder: self.encoder,
            meta: CheckpointMeta {
                model_version: self.model_version,
                trainer_steps: self.steps,
                app_fingerprint: self.app_fingerprint.clone(),
                heat: self.heat.clone(),
            },
        }
    }

    fn encode_state(&mut self, s: &GuiState) -> Result<Arc<EncodedState>> {
        if let Some(e) = self.state_cache.get(s) {
            return Ok(e.clone());
        }
        if self.state_cache.len() >= STATE_CACHE_LIMIT {
            self.state_cache.clear();
        }
        let actions = crate::app_model::actions_for_widgets(&s.widgets)
            .iter()
            .map(|a| self.featurizer.action(a, &s.widgets))
            .collect::<Result<Vec<_>>>()?;
        let e = Arc::new(EncodedState {
            state: self.featurizer.state(s),
            actions,
        });
        self.state_cache.insert(s.clone(), e.clone());
        Ok(e)
    }

    fn encode_goal(&mut self, g: FunctionId) -> Result<Arc<SparseVec>> {
        if let Some(e) = self.goal_cache.get(&g) {
            return Ok(e.clone());
        }
        let e = Arc::new(self.featurizer.goal(g)?);
        self.goal_cache.insert(g, e.clone());
        Ok(e)
    }

    /// Relabels `seq` and pushes the tuples. Returns the number pushed.
    pub fn ingest(&mut self, seq: &EpisodeSequence) -> Result<usize> {
        seq.validate(None)?;
        if self.ingested.contains_key(&seq.id) {
            return Err(Error::Validation(format!("sequence {} already ingested", seq.id)));
        }
        let tuples = relabel(seq, &self.cfg, &mut self.rng)?;
        let mut encoded = Vec::with_capacity(tuples.len());
        for t in &tuples {
            let state = self.encode_state(&t.state)?;
            let next = self.encode_state(&t.next_state)?;
            encoded.push(Replayed {
                action: self.featurizer.action(&t.action, &t.state.widgets)?,
                goal: self.encode_goal(t.goal)?,
                reward: t.reward,
                done: t.done,
                state,
                next,
            });
        }
        self.ingested.insert(seq.id.clone(), seq.len());
        for step in &seq.steps {
            for f in &step.covered {
                *self.heat.entry(*f).or_insert(0) += 1;
            }
        }
        let n = encoded.len();
        self.buffer.extend(encoded);
        Ok(n)
    }

    /// One optimizer step on a uniformly sampled batch.
    pub fn train_step(&mut self) -> Result<StepStats> {
        let idx = self
            .buffer
            .sample_indices(self.cfg.batch_size, self.cfg.min_fill, &mut self.rng)?;
        let mut inputs = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for i in idx {
            let t = self.buffer.get(i).expect("sampled index in range");
            let y = double_dqn_target(
                t.reward,
                t.done,
                self.cfg.gamma,
                &[&t.next.state, &t.goal],
                &t.next.actions,
                &self.pred,
                &self.target,
            )?;
            inputs.push(SparseVec::concat(&[&t.state.state, &t.action, &t.goal]));
            targets.push(y);
        }
        let (loss, grads) = loss_and_grads(
            &self.pred,
            &Batch {
                inputs,
                td_targets: targets,
            },
        )?;
        adam_step(&mut self.pred, &mut self.adam, &grads)?;
        self.steps += 1;
        let synced = self.steps.is_multiple_of(self.cfg.target_sync_interval);
        if synced {
            sync_target(&self.pred, &mut self.target);
            self.syncs += 1;
        }
        Ok(StepStats {
            step: self.steps,
            loss,
            buffer_size: self.buffer.len(),
            synced,
            publish_due: self.steps.is_multiple_of(self.cfg.publish_interval),
        })
    }

    /// Bumps the model version, saves a checkpoint (up to three attempts),
    /// and installs the snapshot in `store`.
    pub fn publish(&mut self, store: &ModelStore, sink: &mut dyn CheckpointSink) -> Result<u64> {
        self.model_version += 1;
        let ckpt = self.checkpoint();
        let mut last_err = None;
        for attempt in 1..=PUBLISH_ATTEMPTS {
            match sink.save(&ckpt) {
                Ok(()) => {
                    last_err = None;
                    break;
                }
                Err(e) => {
                    log::warn!("checkpoint save attempt {attempt} failed: {e}");
                    last_err = Some(e);
                }
            }
        }
        if let Some(e) = last_err {
            self.model_version -= 1;
            return Err(e);
        }
        self.checkpoints += 1;
        store.publish(self.snapshot());
        Ok(self.model_version)
    }

    pub fn summary(&self) -> TrainerSummary {
        TrainerSummary {
            steps: self.steps,
            syncs: self.syncs,
            model_version: self.model_version,
            sequences: self.ingested.len(),
            tuples: self.buffer.pushed(),
            checkpoints: self.checkpoints,
        }
    }
}

/// Consumes sequences from `intake` and trains until `stop` is raised, the
/// intake disconnects, or `max_steps` optimizer steps have run. Sequences
/// still queued when the loop ends are ingested before returning.
pub fn run_trainer(
    trainer: &mut Trainer,
    intake: &Receiver<EpisodeSequence>,
    store: &ModelStore,
    sink: &mut dyn CheckpointSink,
    stop: &AtomicBool,
    max_steps: Option<u64>,
) -> Result<TrainerSummary> {
    let ingest = |trainer: &mut Trainer, seq: EpisodeSequence| {
        if let Err(e) = trainer.ingest(&seq) {
            log::warn!("dropping sequence {}: {e}", seq.id);
        }
    };
    loop {
        while let Ok(seq) = intake.try_recv() {
            ingest(trainer, seq);
        }
        if stop.load(Ordering::Acquire) || max_steps.is_some_and(|m| trainer.steps >= m) {
            break;
        }
        if trainer.ready() {
            let stats = trainer.train_step()?;
            if stats.publish_due {
                trainer.publish(store, sink)?;
            }
        } else {
            match intake.recv_timeout(Duration::from_millis(5)) {
                Ok(seq) => ingest(trainer, seq),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
    }
    while let Ok(seq) = intake.try_recv() {
        ingest(trainer, seq);
    }
    Ok(trainer.summary())
}
