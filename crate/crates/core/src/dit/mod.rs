//! Diffusion transformer over packed prompt and image tokens.

mod model;
mod sample;
mod task;
pub(crate) mod train;

pub use model::{timestep_features, Dit, DitConfig, DitInput, StreamLayout, DIT_PREFIX, TIME_FEATURES};
pub use sample::{euler, sample, SampleRequest, DEFAULT_SAMPLE_STEPS};
pub use task::{choose_conditioning, Task, TaskPlan, P_CONDITION, P_FREEZE_FIRST};
pub use train::{flow_loss, DitModel, DitSample, DitStepLog, DitTrainSettings, DitTrainer, FlowBatch, FlowDraw, DIT_META};
