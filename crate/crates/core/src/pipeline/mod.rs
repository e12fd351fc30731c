//! Experiment configuration, stage caching and end-to-end runs.

mod config;
mod run;
mod store;

pub use config::{hash_text, ControlMode, DataSpec, ExperimentConfig, Variant};
pub use run::{
    load_data, mean_std, run_pipeline, run_sweep, RunManifest, RunStatus, SweepResult, SweepRow, SWEEP_KEYS,
};
pub use store::StageStore;
