//! Episode recording, hindsight relabeling, shaped rewards, replay, and the
//! trainer.

mod episode;
mod relabel;
mod replay;
mod reward;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnet::{AdamConfig, DEFAULT_HIDDEN};

pub use episode::{EpisodeSequence, EpisodeStep, RecordOutcome, SequenceId, DEFAULT_MAX_LEN};
pub use relabel::{future_coverage, relabel, TrainingTuple};
pub use replay::ReplayBuffer;
pub use reward::{
    classify_reward, compute_reward, RewardCase, REWARD_NO_CHANGE, REWARD_OTHER,
    REWARD_SOON_SCALE, REWARD_TRIGGER,
};
pub use trainer::{
    run_trainer, CheckpointSink, DirSink, ModelSnapshot, ModelStore, NullSink, StepStats, Trainer,
    TrainerSummary,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub relabel_k: usize,
    pub max_len: usize,
    pub batch_size: usize,
    pub target_sync_interval: u64,
    pub min_fill: usize,
    pub capacity: usize,
    pub publish_interval: u64,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.99,
            relabel_k: 4,
            max_len: DEFAULT_MAX_LEN,
            batch_size: 64,
            target_sync_interval: 500,
            min_fill: 1_000,
            capacity: 200_000,
            publish_interval: 200,
            hidden: DEFAULT_HIDDEN.to_vec(),
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        for (name, v) in [
            ("relabel_k", self.relabel_k),
            ("max_len", self.max_len),
            ("batch_size", self.batch_size),
            ("min_fill", self.min_fill),
            ("capacity", self.capacity),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.target_sync_interval == 0 || self.publish_interval == 0 {
            return bad("sync and publish intervals must be positive".into());
        }
        if self.min_fill > self.capacity {
            return bad(format!("min_fill {} exceeds capacity {}", self.min_fill, self.capacity));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden sizes must be non-empty and positive".into());
        }
        if !(self.adam.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.adam.lr));
        }
        Ok(())
    }

    /// Layer sizes `[input, hidden.., 1]`.
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(1);
        sizes
    }
}
