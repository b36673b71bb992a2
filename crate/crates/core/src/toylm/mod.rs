//! Tiny mixture-of-experts policy: top-k routing with router replay, a
//! KL-regularized clipped policy-gradient loss with analytic gradients, MTP
//! self-distillation, and a version-aware sampler.

mod loss;
mod model;
mod params;
mod sample;

use thiserror::Error;

pub use loss::{
    loss_and_grad, mtp_distill_loss, mtp_distill_with_grad, KLRegConfig, LossConfig, LossMetrics, TrainingSequence,
};
pub use model::{
    backward_position, forward, forward_cached, forward_position, masked_log_softmax, replay_filter, softmax, top_k,
    PositionCache, ReplaySource, RouterTrace,
};
pub use params::{
    decode_shard, encode_shard, sha256_hex, Adam, Mat, ModelConfig, Real, Shard, ShardHeader, ToyMoEParams,
};
pub use sample::{
    recompute_logprobs, sample, RolloutGenerator, SampleConfig, ScriptedFeed, StaticFeed, StepStatus, ToolEnv,
    VersionFeed,
};

#[derive(Debug, Error)]
pub enum ToyLmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {0} outside the vocabulary")]
    Token(u32),
    #[error("router replay: {0}")]
    Replay(String),
    #[error("training batch: {0}")]
    Batch(String),
    #[error("training sequence is missing sampling log-probabilities")]
    MissingLogprobs,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weight shard: {0}")]
    Shard(String),
    #[error("environment failure: {0}")]
    Env(String),
}

#[cfg(test)]
mod tests;
