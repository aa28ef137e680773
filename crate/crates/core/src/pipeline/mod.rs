//! End-to-end orchestration: configuration, the stage functions, in-memory
//! experiments and resumable run directories.

pub mod config;
pub mod experiment;
pub mod report;
pub mod run;
pub mod stages;

pub use config::{BackendChoice, CamChoice, RetrainInit, RunConfig};
pub use run::{run_pipeline, Run, RunManifest, RunOutcome, Stage, StageKey, StageRecord};
