//! Configuration, checkpoints, logs and the end-to-end workflows.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod log;
mod train;

pub use bench::{bench_scaling, BenchRow, ScalingMode};
pub use checkpoint::Checkpoint;
pub use config::{LatticeConfig, RunConfig, SelectionConfig, SignPrior};
pub use log::{read_log, write_log, EnergyLogRow};
pub use train::{
    estimate_energy, select_init, state_from_checkpoint, train, transfer, SelectOutcome, TrainOutcome, TransferOutcome,
    CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE,
};

use std::path::Path;

use thiserror::Error;

use crate::network::NetworkError;
use crate::oracle::{self, OracleError};
use crate::sampler::SamplerError;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("log error: {0}")]
    Log(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("oracle limit: {0}")]
    OracleCap(String),
}

impl DriverError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 configuration, 3 numerical, 4 oracle cap, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Checkpoint(_) => 2,
            Self::Numerical(_) => 3,
            Self::OracleCap(_) => 4,
            Self::Io { .. } | Self::Log(_) => 1,
        }
    }

    pub(crate) fn from_network(e: NetworkError) -> Self {
        match e {
            NetworkError::NumericalOverflow(_) | NetworkError::UndefinedDerivative => Self::Numerical(e.to_string()),
            _ => Self::Config(e.to_string()),
        }
    }

    pub(crate) fn from_sampler(e: SamplerError, step: u64) -> Self {
        match e {
            SamplerError::InvalidConfig(_) => Self::Config(e.to_string()),
            SamplerError::Network(n) => match Self::from_network(n) {
                Self::Numerical(m) => Self::Numerical(format!("step {step}: {m}")),
                other => other,
            },
            _ => Self::Numerical(format!("step {step}: {e}")),
        }
    }

    pub(crate) fn from_oracle(e: OracleError) -> Self {
        match e {
            OracleError::CapExceeded { .. } | OracleError::TooManySites(_) => Self::OracleCap(e.to_string()),
            OracleError::NotTJ => Self::Config(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

/// Exact ground state of the configured model.
#[derive(Debug, Clone, PartialEq)]
pub struct EdReport {
    pub energy: f64,
    pub energy_per_site: f64,
    pub sector_size: usize,
    pub residual: f64,
    /// Ground-state energy of the independent fermionic path (t-J only).
    pub fermionic_energy: Option<f64>,
}

impl EdReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "e0 = {:.12}\ne0_per_site = {:.12}\nsector_size = {}\nresidual = {:.3e}\n",
            self.energy, self.energy_per_site, self.sector_size, self.residual
        );
        if let Some(f) = self.fermionic_energy {
            s.push_str(&format!("e0_fermionic = {f:.12}\n"));
        }
        s
    }
}

pub fn run_ed(cfg: &RunConfig) -> Result<EdReport, DriverError> {
    cfg.model.validate().map_err(|e| DriverError::Config(e.to_string()))?;
    let ham = cfg.hamiltonian()?;
    let (basis, gs) = oracle::ground_state(&ham).map_err(DriverError::from_oracle)?;
    let fermionic_energy = if cfg.model.kind == crate::hamiltonian::ModelKind::TJ {
        Some(oracle::fermionic_ed(&ham).map_err(DriverError::from_oracle)?.1.energy)
    } else {
        None
    };
    Ok(EdReport {
        energy: gs.energy,
        energy_per_site: gs.energy / ham.n_sites() as f64,
        sector_size: basis.len(),
        residual: gs.residual,
        fermionic_energy,
    })
}
