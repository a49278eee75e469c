//! Configuration, canned experiment recipes and run artifacts.

pub mod config;
pub mod output;
pub mod recipes;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ConfigError, Experiment, ExperimentConfig, Preset};
pub use output::{config_hash, write_atomic, OutputSink, RunManifest};

use crate::dynamics::DynamicsError;
use crate::kernels::KernelError;
use crate::landscape::LandscapeError;
use crate::models::ModelError;
use crate::numerics::NumericsError;
use crate::oracles::OracleError;
use crate::stability::StabilityError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("cannot build thread pool: {0}")]
    ThreadPool(String),
    #[error("{0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Stability(#[from] StabilityError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl HarnessError {
    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

/// Runs the configured recipe, writes its outputs and `manifest.json` under
/// `cfg.output_dir`, and returns the manifest. A failed verification is reported
/// through `RunManifest::verified`, not as an error.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    cfg.validate()?;
    let started = output::unix_now();
    let hash = config_hash(cfg);
    let mut sink = OutputSink::new(cfg.output_dir.clone(), hash.clone());
    sink.file("config.txt", cfg.to_text().as_bytes())?;
    let verified = recipes::run(cfg, &mut sink)?;
    let mut manifest = RunManifest {
        experiment: cfg.experiment.to_string(),
        config: cfg.to_text(),
        config_hash: hash,
        seed: cfg.seed,
        started_unix: started,
        finished_unix: output::unix_now(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        output_dir: cfg.output_dir.clone(),
        outputs: sink.files().to_vec(),
        verified,
    };
    manifest.outputs.push(output::OutputFile {
        name: "manifest.json".into(),
        bytes: 0,
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| HarnessError::Io {
        path: cfg.output_dir.join("manifest.json"),
        message: e.to_string(),
    })?;
    write_atomic(&cfg.output_dir.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

/// [`run_experiment`] inside a dedicated pool of `threads` workers (rayon's default
/// when `None`).
pub fn run_with_threads(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<RunManifest, HarnessError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| HarnessError::ThreadPool(e.to_string()))?;
    pool.install(|| run_experiment(cfg))
}
