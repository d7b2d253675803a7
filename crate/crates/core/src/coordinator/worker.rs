use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use super::protocol::{codes, model_to_base64, WireMessage};
use super::QEvaluator;
use crate::app_model::{ActionSpec, FunctionId, FunctionTable, GuiState};
use crate::encoder::Featurizer;
use crate::error::{Error, Result};
use crate::learner::{EpisodeSequence, ModelSnapshot, ModelStore};
use crate::qnet::argmax;

/// Counters kept by a [`Worker`].
#[derive(Debug, Default)]
pub struct WorkerStats {
    pub requests: AtomicU64,
    pub get_q: AtomicU64,
    pub sequences_accepted: AtomicU64,
    pub steps_accepted: AtomicU64,
    pub rejected: AtomicU64,
    pub backpressure: AtomicU64,
}

/// Server side of the session interfaces: answers Q queries with the latest
/// published model and forwards validated sequences to the trainer intake.
pub struct Worker {
    table: FunctionTable,
    fingerprint: String,
    store: ModelStore,
    intake: SyncSender<EpisodeSequence>,
    sessions: Mutex<BTreeSet<String>>,
    evaluator: Mutex<QEvaluator>,
    pub stats: WorkerStats,
}

impl Worker {
    pub fn new(
        table: FunctionTable,
        fingerprint: impl Into<String>,
        featurizer: Arc<dyn Featurizer>,
        store: ModelStore,
        intake: SyncSender<EpisodeSequence>,
    ) -> Self {
        Worker {
            table,
            fingerprint: fingerprint.into(),
            store,
            intake,
            sessions: Mutex::new(BTreeSet::new()),
            evaluator: Mutex::new(QEvaluator::new(featurizer)),
            stats: WorkerStats::default(),
        }
    }

    pub fn store(&self) -> &ModelStore {
        &self.store
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn sessions(&self) -> Vec<String> {
        self.sessions.lock().unwrap().iter().cloned().collect()
    }

    /// Answers one request. `session` is the connection's registered session,
    /// set by a successful hello.
    pub fn handle(&self, session: &mut Option<String>, msg: WireMessage) -> WireMessage {
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let cid = msg.cid();
        match msg {
            WireMessage::Hello {
                session_id,
                app_fingerprint,
                ..
            } => {
                if app_fingerprint != self.fingerprint {
                    return WireMessage::error(
                        cid,
                        codes::FINGERPRINT_MISMATCH,
                        format!("server app {} != client app {app_fingerprint}", self.fingerprint),
                    );
                }
                if session_id.is_empty() {
                    return WireMessage::error(cid, codes::MALFORMED, "empty session_id");
                }
                self.sessions.lock().unwrap().insert(session_id.clone());
                *session = Some(session_id);
                WireMessage::Ack { cid, accepted: 0 }
            }
            WireMessage::GetQ {
                state,
                candidates,
                goal,
                ..
            } => {
                if session.is_none() {
                    return unknown_session(cid);
                }
                match self.get_q(&state, &candidates, goal) {
                    Ok((q_values, chosen)) => WireMessage::GetQResp {
                        cid,
                        q_values,
                        chosen,
                    },
                    Err(e) => WireMessage::error(cid, codes::MALFORMED, e.to_string()),
                }
            }
            WireMessage::AddTrainingData { sequence, .. } => {
                let Some(sid) = session.as_deref() else {
                    return unknown_session(cid);
                };
                match self.add_training_data(sid, sequence) {
                    Ok(accepted) => WireMessage::Ack { cid, accepted },
                    Err(Error::Remote { code, message }) => WireMessage::Error { cid, code, message },
                    Err(e) => WireMessage::error(cid, codes::INVALID_SEQUENCE, e.to_string()),
                }
            }
            WireMessage::GetModel { have_version, .. } => {
                if session.is_none() {
                    return unknown_session(cid);
                }
                let snap = self.store.latest();
                let bytes = if snap.version > have_version {
                    model_to_base64(&snap)
                } else {
                    String::new()
                };
                WireMessage::ModelBlob {
                    cid,
                    version: snap.version,
                    bytes,
                }
            }
            other => WireMessage::error(
                cid,
                codes::MALFORMED,
                format!("{} is not a request", serde_json::to_value(&other).map(|v| v["type"].to_string()).unwrap_or_default()),
            ),
        }
    }

    pub fn get_q(
        &self,
        state: &GuiState,
        candidates: &[ActionSpec],
        goal: FunctionId,
    ) -> Result<(Vec<f64>, usize)> {
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        if !self.table.contains(goal) {
            return Err(Error::UnknownFunction(goal));
        }
        self.stats.get_q.fetch_add(1, Ordering::Relaxed);
        let snap = self.store.latest();
        let q = self
            .evaluator
            .lock()
            .unwrap()
            .q_values_for(&snap.params, state, candidates, goal)?;
        let chosen = argmax(&q).expect("non-empty");
        Ok((q, chosen))
    }

    /// Validates and enqueues a sequence. Backpressure and shutdown surface
    /// as [`Error::Remote`] with the matching code.
    pub fn add_training_data(&self, session: &str, sequence: EpisodeSequence) -> Result<usize> {
        let check = || -> Result<()> {
            if sequence.id.session != session {
                return Err(Error::Validation(format!(
                    "sequence {} submitted by session {session}",
                    sequence.id
                )));
            }
            if sequence.is_empty() {
                return Err(Error::Validation("empty sequence".into()));
            }
            sequence.validate(Some(&self.table))
        };
        if let Err(e) = check() {
            self.stats.rejected.fetch_add(1, Ordering::Relaxed);
            return Err(e);
        }
        let n = sequence.len();
        match self.intake.try_send(sequence) {
            Ok(()) => {
                self.stats.sequences_accepted.fetch_add(1, Ordering::Relaxed);
                self.stats.steps_accepted.fetch_add(n as u64, Ordering::Relaxed);
                Ok(n)
            }
            Err(TrySendError::Full(_)) => {
                self.stats.backpressure.fetch_add(1, Ordering::Relaxed);
                Err(Error::Remote {
                    code: codes::BACKPRESSURE.into(),
                    message: "trainer intake full".into(),
                })
            }
            Err(TrySendError::Disconnected(_)) => Err(Error::Remote {
                code: codes::UNAVAILABLE.into(),
                message: "trainer stopped".into(),
            }),
        }
    }
}

fn unknown_session(cid: u64) -> WireMessage {
    WireMessage::error(cid, codes::UNKNOWN_SESSION, "no hello on this connection")
}

/// Client view of a worker.
pub trait Transport: Send {
    fn get_q(
        &mut self,
        state: &GuiState,
        candidates: &[ActionSpec],
        goal: FunctionId,
    ) -> Result<(Vec<f64>, usize)>;

    fn add_training_data(&mut self, sequence: &EpisodeSequence) -> Result<usize>;

    /// A newer snapshot than `have_version`, if one exists.
    fn get_model(&mut self, have_version: u64) -> Result<Option<Arc<ModelSnapshot>>>;
}

/// In-process transport that goes through [`Worker::handle`] without a socket.
pub struct LocalTransport {
    worker: Arc<Worker>,
    session: Option<String>,
    next_cid: u64,
}

impl LocalTransport {
    pub fn connect(worker: Arc<Worker>, session_id: &str) -> Result<Self> {
        let mut t = LocalTransport {
            worker,
            session: None,
            next_cid: 1,
        };
        let fp = t.worker.fingerprint().to_string();
        t.call(|cid| WireMessage::Hello {
            cid,
            session_id: session_id.to_string(),
            app_fingerprint: fp,
        })?;
        Ok(t)
    }

    fn call(&mut self, build: impl FnOnce(u64) -> WireMessage) -> Result<WireMessage> {
        let cid = self.next_cid;
        self.next_cid += 1;
        let resp = self.worker.handle(&mut self.session, build(cid));
        if resp.cid() != cid {
            return Err(Error::Protocol(format!("cid {} answered as {}", cid, resp.cid())));
        }
        resp.into_result()
    }
}

impl Transport for LocalTransport {
    fn get_q(
        &mut self,
        state: &GuiState,
        candidates: &[ActionSpec],
        goal: FunctionId,
    ) -> Result<(Vec<f64>, usize)> {
        match self.call(|cid| WireMessage::GetQ {
            cid,
            state: state.clone(),
            candidates: candidates.to_vec(),
            goal,
        })? {
            WireMessage::GetQResp {
                q_values, chosen, ..
            } => Ok((q_values, chosen)),
            other => Err(unexpected(&other)),
        }
    }

    fn add_training_data(&mut self, sequence: &EpisodeSequence) -> Result<usize> {
        match self.call(|cid| WireMessage::AddTrainingData {
            cid,
            sequence: sequence.clone(),
        })? {
            WireMessage::Ack { accepted, .. } => Ok(accepted),
            other => Err(unexpected(&other)),
        }
    }

    fn get_model(&mut self, have_version: u64) -> Result<Option<Arc<ModelSnapshot>>> {
        let snap = self.worker.store().latest();
        Ok((snap.version > have_version).then_some(snap))
    }
}

pub(super) fn unexpected(msg: &WireMessage) -> Error {
    Error::Protocol(format!("unexpected response {msg:?}"))
}

/// Runs `f` up to `attempts` times with exponential backoff starting at
/// `base`, retrying transport failures and backpressure only.
pub fn with_retry<T>(
    attempts: usize,
    base: Duration,
    mut f: impl FnMut() -> Result<T>,
) -> Result<T> {
    let mut delay = base;
    let mut last = None;
    for attempt in 0..attempts.max(1) {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) if retryable(&e) => {
                log::debug!("attempt {} failed: {e}", attempt + 1);
                last = Some(e);
                if attempt + 1 < attempts {
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::Remote { code, .. } => code == codes::BACKPRESSURE,
        Error::Io(_) | Error::Protocol(_) => true,
        _ => false,
    }
}
