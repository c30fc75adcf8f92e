//! Miniature vision-language pipeline: a patch encoder, a swappable
//! projector and a causal text decoder, with per-step attention tracing.

pub mod config;
pub mod mllm;
pub mod params;
pub mod record;
pub mod task;
pub mod train;

pub use config::{ModelConfig, ProjectorConfig, ProjectorKind};
pub use mllm::{argmax, pool_plan, Encoded, Mllm, PatchCache, Projected};
pub use params::Params;
pub use record::{AttentionTrace, AttnModule, GenerationRecord, PoolRecord, StepTrace, TraceMode};
pub use task::{Image, Sample, SyntheticTask, Vocab, BOS, EOS, PAD};
pub use train::{caption_accuracy, train, LossPoint, TrainConfig};
