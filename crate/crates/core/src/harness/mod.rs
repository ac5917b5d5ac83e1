//! Experiment harness: calibrated noise, level sweeps, slope fits, and the
//! configuration and report formats behind the command-line driver.
//!
//! The pieces compose in one direction:
//!
//! * [`config`] declares every physical and numerical parameter of an
//!   experiment as a structured text file with documented defaults;
//! * [`profile`] turns a configuration into a solved instance pair (truth
//!   and reference) ready for inversion;
//! * [`noise`] perturbs observation bundles at a calibrated level;
//! * [`sweep`] runs noise level ladders, fits stability slopes, and renders
//!   rows to CSV and JSON.
//!
//! Reproducibility contract: every random draw is keyed by explicit seeds
//! and stream ids, sweep aggregation is fixed-order, and float rendering
//! uses the shortest round-trip form, so a repeated run (at any thread
//! count) emits byte-identical reports.

pub mod config;
pub mod noise;
pub mod profile;
pub mod sweep;

pub use config::ExperimentConfig;
pub use noise::{
    add_noise, add_noise_with_report, measure_channel, BindingNorm, Channel, ChannelReport,
    NoiseReport, NoiseSpec,
};
pub use profile::{build_experiment, Experiment};
pub use sweep::{
    fit_slope, result_to_json, rows_to_csv, run_sweep, SlopeFit, SweepResult, SweepRow, CSV_HEADER,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid harness input: {0}")]
    Invalid(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// A verification subcommand ran to completion and the property failed.
    #[error("check failed: {0}")]
    Check(String),
    #[error("slope fit needs at least 3 distinct positive levels above the baseline, found {found}")]
    InsufficientPoints { found: usize },
    #[error(transparent)]
    Grid(#[from] crate::grid::GridError),
    #[error(transparent)]
    Kernel(#[from] crate::kernel::KernelError),
    #[error(transparent)]
    Mfg(#[from] crate::mfg::MfgError),
    #[error(transparent)]
    Carleman(#[from] crate::carleman::CarlemanError),
    #[error(transparent)]
    Transform(#[from] crate::transform::TransformError),
    #[error(transparent)]
    Inversion(#[from] crate::inversion::InversionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;
