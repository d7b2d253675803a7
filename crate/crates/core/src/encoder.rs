//! Feature-hashing encoder for `(state, action, goal)` triples.
//!
//! Tokens are hashed with a seeded 64-bit hash into buckets with a sign bit;
//! bucket totals are squashed with `|x| / (1 + |x|)` so every entry lies in
//! `[0, 1)`. The first eight action entries are a one-hot event-kind block.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::app_model::{ActionSpec, FunctionId, FunctionTable, GuiState, Widget};
use crate::error::{Error, Result};
use crate::qnet::SparseVec;

/// Entries of the action vector reserved for the event-kind block.
pub const EVENT_BLOCK: usize = 8;
const MIN_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub goal_dim: usize,
    pub hash_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            state_dim: 128,
            action_dim: 64,
            goal_dim: 64,
            hash_seed: 0x5eed_cafe,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("state_dim", self.state_dim),
            ("action_dim", self.action_dim),
            ("goal_dim", self.goal_dim),
        ] {
            if d < MIN_DIM {
                return Err(Error::Config(format!("{name} = {d}, must be >= {MIN_DIM}")));
            }
        }
        if self.action_dim <= EVENT_BLOCK {
            return Err(Error::Config(format!(
                "action_dim must exceed the {EVENT_BLOCK}-entry event block"
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim + self.goal_dim
    }
}

/// Canonical identity of a screen, ignoring text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct StateKey(pub u64);

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

impl From<StateKey> for String {
    fn from(k: StateKey) -> Self {
        k.to_string()
    }
}

impl TryFrom<String> for StateKey {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        u64::from_str_radix(&s, 16)
            .map(StateKey)
            .map_err(|e| format!("bad state key `{s}`: {e}"))
    }
}

impl StateKey {
    pub fn of(state: &GuiState) -> StateKey {
        let mut tuples: Vec<String> = state
            .widgets
            .iter()
            .map(|w| {
                let events: Vec<&str> = w.supported_events.iter().map(|e| e.as_str()).collect();
                format!("{}\u{1f}{}\u{1f}{}", w.widget_class, w.resource_id, events.join(","))
            })
            .collect();
        tuples.sort();
        let mut h = Sha256::new();
        h.update(state.activity.as_bytes());
        for t in &tuples {
            h.update([0x1e]);
            h.update(t.as_bytes());
        }
        let d = h.finalize();
        StateKey(u64::from_le_bytes(d[..8].try_into().unwrap()))
    }
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_token(seed: u64, token: &str) -> u64 {
    // FNV-1a over the token, finished with a splitmix round keyed by the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ mix64(seed);
    for b in token.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(h ^ seed.rotate_left(17))
}

struct Hasher {
    seed: u64,
    base: usize,
    width: usize,
    totals: Vec<f64>,
}

impl Hasher {
    fn new(seed: u64, dim: usize, base: usize) -> Self {
        Hasher {
            seed,
            base,
            width: dim - base,
            totals: vec![0.0; dim],
        }
    }

    fn add(&mut self, token: &str) {
        let h = hash_token(self.seed, token);
        let bucket = self.base + (h % self.width as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        self.totals[bucket] += sign;
    }

    fn finish(self) -> Vec<f64> {
        let base = self.base;
        self.totals
            .into_iter()
            .enumerate()
            .map(|(i, x)| if i < base { x } else { x.abs() / (1.0 + x.abs()) })
            .collect()
    }
}

fn text_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| format!("text:{}", t.to_lowercase()))
}

pub fn encode_state(cfg: &EncoderConfig, state: &GuiState) -> Vec<f64> {
    let mut h = Hasher::new(cfg.hash_seed, cfg.state_dim, 0);
    h.add(&format!("activity:{}", state.activity));
    for w in &state.widgets {
        h.add(&format!("class:{}", w.widget_class));
        h.add(&format!("rid:{}", w.resource_id));
        for t in text_tokens(&w.text) {
            h.add(&t);
        }
        for e in &w.supported_events {
            h.add(&format!("event:{}", e.as_str()));
        }
    }
    h.finish()
}

pub fn encode_action(cfg: &EncoderConfig, action: &ActionSpec, widgets: &[Widget]) -> Result<Vec<f64>> {
    let mut h = Hasher::new(cfg.hash_seed ^ 0xa5a5, cfg.action_dim, EVENT_BLOCK);
    h.totals[action.event_kind.ordinal()] = 1.0;
    match action.widget_index {
        None if action.event_kind == crate::app_model::EventKind::Back => {}
        None => {
            return Err(Error::InvalidAction(format!(
                "{} requires a target widget",
                action.event_kind
            )))
        }
        Some(i) => {
            let w = widgets
                .get(i)
                .ok_or_else(|| Error::InvalidAction(format!("widget {i} out of range")))?;
            if !w.supports(action.event_kind) {
                return Err(Error::InvalidAction(format!(
                    "widget {i} does not support {}",
                    action.event_kind
                )));
            }
            h.add(&format!(
                "{}|{}|{}",
                action.event_kind.as_str(),
                w.widget_class,
                w.resource_id
            ));
            h.add(&format!("class:{}", w.widget_class));
            h.add(&format!("rid:{}", w.resource_id));
        }
    }
    Ok(h.finish())
}

pub fn encode_goal(cfg: &EncoderConfig, goal: FunctionId, table: &FunctionTable) -> Result<Vec<f64>> {
    let sig = table.signature(goal)?;
    let mut h = Hasher::new(cfg.hash_seed ^ 0x5a5a, cfg.goal_dim, 0);
    for tok in sig.split('.').filter(|t| !t.is_empty()) {
        h.add(tok);
    }
    Ok(h.finish())
}

/// `[state | action | goal]`.
pub fn encode_input(
    cfg: &EncoderConfig,
    state: &GuiState,
    action: &ActionSpec,
    goal: FunctionId,
    table: &FunctionTable,
) -> Result<Vec<f64>> {
    let mut v = encode_state(cfg, state);
    v.extend(encode_action(cfg, action, &state.widgets)?);
    v.extend(encode_goal(cfg, goal, table)?);
    Ok(v)
}

/// Produces the sparse network input segments for states, actions, and goals.
///
/// Returned vectors use absolute input coordinates: states occupy
/// `[0, S)`, actions `[S, S + A)`, goals `[S + A, S + A + G)`.
pub trait Featurizer: Send + Sync {
    fn input_dim(&self) -> usize;
    fn state(&self, state: &GuiState) -> SparseVec;
    fn action(&self, action: &ActionSpec, widgets: &[Widget]) -> Result<SparseVec>;
    fn goal(&self, goal: FunctionId) -> Result<SparseVec>;
}

/// [`Featurizer`] backed by the hashing encoder.
#[derive(Clone, Debug)]
pub struct HashFeaturizer {
    pub cfg: EncoderConfig,
    pub table: FunctionTable,
}

impl HashFeaturizer {
    pub fn new(cfg: EncoderConfig, table: FunctionTable) -> Result<Self> {
        cfg.validate()?;
        Ok(HashFeaturizer { cfg, table })
    }
}

impl Featurizer for HashFeaturizer {
    fn input_dim(&self) -> usize {
        self.cfg.input_dim()
    }

    fn state(&self, state: &GuiState) -> SparseVec {
        SparseVec::from_dense(&encode_state(&self.cfg, state), 0)
    }

    fn action(&self, action: &ActionSpec, widgets: &[Widget]) -> Result<SparseVec> {
        Ok(SparseVec::from_dense(
            &encode_action(&self.cfg, action, widgets)?,
            self.cfg.state_dim,
        ))
    }

    fn goal(&self, goal: FunctionId) -> Result<SparseVec> {
        Ok(SparseVec::from_dense(
            &encode_goal(&self.cfg, goal, &self.table)?,
            self.cfg.state_dim + self.cfg.action_dim,
        ))
    }
}
