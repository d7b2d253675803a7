//! Change-targeted GUI test generation with goal-conditioned Double DQN.
//!
//! The crate is organized bottom-up:
//!
//! - [`app_model`]: simulated apps (screen graphs with coverage feeds).
//! - [`encoder`]: feature hashing of states, actions, and goal functions.
//! - [`qnet`]: the Q-network, optimizer, target sync, and checkpoints.
//! - [`learner`]: episodes, hindsight relabeling, rewards, replay, trainer.
//! - [`coordinator`]: device sessions, the worker protocol, guided runs.
//! - [`harness`]: experiment commands behind the CLI.

pub mod app_model;
pub mod coordinator;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod learner;
pub mod qnet;

pub use app_model::{
    load_app_model, ActionSpec, AppModel, EventKind, FunctionId, FunctionTable, GeneratorSpec,
    GuiState, Screen, Widget,
};
pub use encoder::{EncoderConfig, Featurizer, HashFeaturizer, StateKey};
pub use error::{Error, Result};
pub use qnet::{MlpParams, SparseVec};
