//! Strong- and weak-scaling measurements of the sampling and SR phases.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::train::thread_pool;
use super::DriverError;
use crate::network::{Cnn, NeuralState};
use crate::optimizer::{build_sr_stats, solve_delta};
use crate::sampler::{initial_configs, run_chains, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingMode {
    /// Fixed total chains.
    Strong,
    /// Chains per worker fixed.
    Weak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: ScalingMode,
    pub workers: usize,
    pub n_chains: usize,
    pub n_samples: usize,
    pub mcmc_s: f64,
    pub sr_s: f64,
    /// `T1 / (w·Tw)` for strong scaling, `T1 / Tw` for weak scaling, on the
    /// sampling phase.
    pub efficiency: f64,
}

/// Times one SR step (sampling + solve) per worker count. The first count is
/// the reference; pass it as 1 for the usual definition.
pub fn bench_scaling(
    cfg: &RunConfig,
    workers: &[usize],
    mode: ScalingMode,
    reps: usize,
) -> Result<Vec<BenchRow>, DriverError> {
    cfg.validate()?;
    if workers.is_empty() || workers.contains(&0) {
        return Err(DriverError::Config("worker counts must be positive".into()));
    }
    let ham = cfg.hamiltonian()?;
    let geom = ham.geometry().clone();
    let cnn = std::sync::Arc::new(Cnn::new(cfg.network.clone()).map_err(DriverError::from_network)?);
    let theta = cnn.init_params();
    let state = NeuralState::new(cnn, theta, geom.clone(), cfg.use_sign_prior()).map_err(DriverError::from_network)?;
    let base = cfg.sampler_config();
    let mut rows: Vec<BenchRow> = Vec::new();
    for &w in workers {
        let n_chains = match mode {
            ScalingMode::Strong => base.n_chains,
            ScalingMode::Weak => base.n_chains * w,
        };
        let scfg = SamplerConfig {
            n_chains,
            ..base.clone()
        };
        let starts = initial_configs(&ham, cfg.seed, n_chains);
        let pool = thread_pool(w)?;
        let (mut mcmc, mut sr) = (f64::INFINITY, f64::INFINITY);
        for rep in 0..reps.max(1) {
            let t0 = Instant::now();
            let batch = pool
                .install(|| run_chains(&scfg, &state, &ham, &starts, rep as u64, 0, true))
                .map_err(|e| DriverError::from_sampler(e, 0))?;
            mcmc = mcmc.min(t0.elapsed().as_secs_f64());
            let t1 = Instant::now();
            let stats = build_sr_stats(&batch).map_err(|e| DriverError::Numerical(e.to_string()))?;
            solve_delta(&stats, &cfg.sr).map_err(|e| DriverError::Numerical(e.to_string()))?;
            sr = sr.min(t1.elapsed().as_secs_f64());
        }
        let efficiency = match rows.first() {
            None => 1.0,
            Some(r0) => {
                let ratio = r0.mcmc_s / mcmc;
                match mode {
                    ScalingMode::Strong => ratio * r0.workers as f64 / w as f64,
                    ScalingMode::Weak => ratio,
                }
            }
        };
        rows.push(BenchRow {
            mode,
            workers: w,
            n_chains,
            n_samples: scfg.n_samples(),
            mcmc_s: mcmc,
            sr_s: sr,
            efficiency,
        });
    }
    Ok(rows)
}

pub fn write_report(path: &Path, rows: &[BenchRow]) -> Result<(), DriverError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| DriverError::Log(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| DriverError::Log(e.to_string()))?;
    }
    w.flush().map_err(|e| DriverError::io(path, e))
}
