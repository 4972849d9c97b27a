//! Deterministic experiment driver: configuration, datasets and file
//! formats, the simulated federation, and sweeps that emit CSV.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod io;
mod run;
pub mod sim;

pub use config::{derive_seed, DataSource, RawConfig, ScenarioConfig, Schedule, Topology, Vantage};
pub use run::{
    attack_config, attack_gradients, build_federation, csv_header, run_scenario, run_sweep, run_training_stage_sweep,
    snapshot_stages, target, thread_count, RunRecord, RunSummary, Snapshot,
};
