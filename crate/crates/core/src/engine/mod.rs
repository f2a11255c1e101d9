//! Synthetic data, training, sampling and the synchronization experiment.

pub mod data;
pub mod experiment;
pub mod optim;
pub mod sample;
pub mod train;

pub use data::{
    detect_onsets, synth_pair, sync_score, DetectorConfig, EventScene, SyncFailure, SyncOutcome,
    SyncReport, SynthConfig,
};
pub use optim::{AdamW, OptimizerGroups};
pub use sample::{sample, sample_from, SampleConfig, SampleOutput, StepTime, VelocityModel};
pub use train::{train_step, Example, StepStats, TrainConfig, TrainPhase, Trainer};
