//! The optimization loop and the workflows built on it.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::log::{read_log, write_log, EnergyLogRow};
use super::DriverError;
use crate::hamiltonian::Hamiltonian;
use crate::lattice::{Configuration, LatticeGeometry};
use crate::network::{transfer_params, Cnn, NetworkConfig, NeuralState, ParameterVector};
use crate::optimizer::{apply_update, build_sr_stats, distributed_sr, solve_delta};
use crate::sampler::{initial_configs, run_chains, select_initial_state, SampleBatch, SamplerConfig, Selection};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOG_FILE: &str = "energy.csv";
pub const CONFIG_FILE: &str = "config.toml";

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, DriverError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| DriverError::Config(format!("thread pool: {e}")))
}

fn make_state(
    network: &NetworkConfig,
    theta: ParameterVector,
    geom: &LatticeGeometry,
    sign_prior: bool,
) -> Result<NeuralState, DriverError> {
    let cnn = Arc::new(Cnn::new(network.clone()).map_err(DriverError::from_network)?);
    NeuralState::new(cnn, theta, geom.clone(), sign_prior).map_err(DriverError::from_network)
}

/// Spreads stored chain states over `n` chains, cycling if there are fewer.
fn expand_chains(stored: &[Configuration], ham: &Hamiltonian, n: usize) -> Result<Vec<Configuration>, DriverError> {
    let out: Vec<Configuration> = (0..n).map(|c| stored[c % stored.len()].clone()).collect();
    for s in &out {
        ham.sector()
            .check(s)
            .map_err(|e| DriverError::Config(format!("checkpoint chain state: {e}")))?;
    }
    Ok(out)
}

fn row_from(
    step: u64,
    batch: &SampleBatch,
    n_sites: usize,
    residual: f64,
    start: Instant,
    mcmc: f64,
    sr: f64,
) -> EnergyLogRow {
    let n = batch.n_samples() as f64;
    let mean = batch.e_loc.iter().sum::<f64>() / n;
    let var = batch.e_loc.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    EnergyLogRow {
        step,
        e_mean_per_site: mean / n_sites as f64,
        e_stderr: (var / n).sqrt() / n_sites as f64,
        acceptance: batch.acceptance_rate,
        sr_residual: residual,
        wallclock_s: start.elapsed().as_secs_f64(),
        wall_mcmc_s: mcmc,
        wall_sr_s: sr,
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub rows: Vec<EnergyLogRow>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
}

/// Runs `cfg.n_steps` SR iterations, resuming from `cfg.resume_from` when set.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainOutcome, DriverError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| DriverError::io(out_dir, e))?;
    std::fs::write(out_dir.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| DriverError::io(out_dir, e))?;
    let pool = thread_pool(cfg.workers)?;
    let ham = cfg.hamiltonian()?;
    let geom = ham.geometry().clone();
    let n_sites = geom.n_sites();
    let scfg: SamplerConfig = cfg.sampler_config();
    let mut sign_prior = cfg.use_sign_prior();
    let log_path = out_dir.join(LOG_FILE);
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);

    let (theta, mut step, mut chains, mut rows, provenance) = match &cfg.resume_from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if !ck.network.same_architecture(&cfg.network) {
                return Err(DriverError::Config(format!(
                    "checkpoint network {:?} does not match the configured {:?}",
                    ck.network, cfg.network
                )));
            }
            if (ck.lx, ck.ly) != (cfg.lattice.lx, cfg.lattice.ly) {
                return Err(DriverError::Config(format!(
                    "checkpoint lattice {}x{} differs from the configured {}x{}",
                    ck.lx, ck.ly, cfg.lattice.lx, cfg.lattice.ly
                )));
            }
            let chains = if ck.chains.is_empty() {
                initial_configs(&ham, cfg.seed, scfg.n_chains)
            } else {
                expand_chains(&ck.chains, &ham, scfg.n_chains)?
            };
            let rows = if log_path.exists() && ck.step > 0 {
                read_log(&log_path)?.into_iter().filter(|r| r.step < ck.step).collect()
            } else {
                Vec::new()
            };
            sign_prior = ck.sign_prior;
            (ck.theta, ck.step, chains, rows, ck.provenance)
        }
        None => {
            let cnn = Cnn::new(cfg.network.clone()).map_err(DriverError::from_network)?;
            (
                cnn.init_params(),
                0,
                initial_configs(&ham, cfg.seed, scfg.n_chains),
                Vec::new(),
                format!("train seed={}", cfg.seed),
            )
        }
    };
    let mut state = make_state(&cfg.network, theta, &geom, sign_prior)?;
    let first_step = step;
    let warmup_for = |s: u64| if s == 0 { scfg.warmup_sweeps * n_sites } else { 0 };
    let start = Instant::now();

    let checkpoint = |state: &NeuralState, step: u64, chains: &[Configuration]| Checkpoint {
        network: cfg.network.clone(),
        lx: geom.lx(),
        ly: geom.ly(),
        sign_prior,
        theta: state.params().clone(),
        rng_seed: cfg.seed,
        rng_counter: step,
        step,
        chains: chains.to_vec(),
        provenance: provenance.clone(),
    };

    if cfg.n_steps == 0 {
        let t0 = Instant::now();
        let batch = pool
            .install(|| run_chains(&scfg, &state, &ham, &chains, step, warmup_for(step), false))
            .map_err(|e| DriverError::from_sampler(e, step))?;
        let mcmc = t0.elapsed().as_secs_f64();
        rows.push(row_from(step, &batch, n_sites, f64::NAN, start, mcmc, 0.0));
        chains = batch.configs;
    }

    while step < cfg.n_steps as u64 {
        let t0 = Instant::now();
        let batch = pool
            .install(|| run_chains(&scfg, &state, &ham, &chains, step, warmup_for(step), true))
            .map_err(|e| DriverError::from_sampler(e, step))?;
        let mcmc = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let numerical = |e: crate::optimizer::SrError| DriverError::Numerical(format!("step {step}: {e}"));
        let (delta, residual) = if cfg.sr.mesh_p > 1 {
            let n = batch.n_samples();
            let w = vec![1.0 / n as f64; n];
            let res = distributed_sr(&batch.e_loc, &batch.o_loc, batch.n_params, &w, &cfg.sr).map_err(numerical)?;
            (res.delta, res.residual)
        } else {
            let stats = build_sr_stats(&batch).map_err(numerical)?;
            let sol = solve_delta(&stats, &cfg.sr).map_err(numerical)?;
            (sol.delta, sol.residual)
        };
        let mut theta = state.params().clone().into_inner();
        apply_update(&mut theta, delta.as_slice(), cfg.sr.eta).map_err(numerical)?;
        let theta = ParameterVector::new(theta);
        if !theta.is_finite() {
            return Err(DriverError::Numerical(format!("step {step}: non-finite parameters")));
        }
        state.set_params(theta).map_err(DriverError::from_network)?;
        let sr = t1.elapsed().as_secs_f64();
        rows.push(row_from(step, &batch, n_sites, residual, start, mcmc, sr));
        chains = batch.configs;
        step += 1;
        log::info!(
            "step {} E/N = {:.6} ± {:.6} acc = {:.3}",
            step - 1,
            rows.last().expect("row").e_mean_per_site,
            rows.last().expect("row").e_stderr,
            rows.last().expect("row").acceptance
        );
        write_log(&log_path, &rows)?;
        if cfg.checkpoint_every > 0 && (step - first_step) % cfg.checkpoint_every as u64 == 0 {
            checkpoint(&state, step, &chains).save(&ckpt_path)?;
        }
    }
    write_log(&log_path, &rows)?;
    let ck = checkpoint(&state, step, &chains);
    ck.save(&ckpt_path)?;
    Ok(TrainOutcome {
        rows,
        checkpoint: ck,
        checkpoint_path: ckpt_path,
        log_path,
    })
}

/// Rebuilds the wavefunction stored in a checkpoint.
pub fn state_from_checkpoint(ck: &Checkpoint) -> Result<NeuralState, DriverError> {
    let geom = LatticeGeometry::new(ck.lx, ck.ly).map_err(|e| DriverError::Checkpoint(e.to_string()))?;
    make_state(&ck.network, ck.theta.clone(), &geom, ck.sign_prior)
}

/// Sampled energy per site (mean, standard error) without derivatives.
pub fn estimate_energy(
    cfg: &RunConfig,
    state: &NeuralState,
    ham: &Hamiltonian,
    round: u64,
) -> Result<(EnergyLogRow, Vec<Configuration>), DriverError> {
    let pool = thread_pool(cfg.workers)?;
    let scfg = cfg.sampler_config();
    let n_sites = ham.n_sites();
    let starts = initial_configs(ham, cfg.seed, scfg.n_chains);
    let start = Instant::now();
    let batch = pool
        .install(|| run_chains(&scfg, state, ham, &starts, round, scfg.warmup_sweeps * n_sites, false))
        .map_err(|e| DriverError::from_sampler(e, round))?;
    let mcmc = start.elapsed().as_secs_f64();
    let row = row_from(round, &batch, n_sites, f64::NAN, start, mcmc, 0.0);
    Ok((row, batch.configs))
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub checkpoint: Checkpoint,
    pub initial_estimate: EnergyLogRow,
}

/// Moves the parameters of `source` onto the `target` lattice of `cfg` and
/// estimates the initial energy there.
pub fn transfer(
    cfg: &RunConfig,
    source: &Checkpoint,
    target_network: &NetworkConfig,
    out_dir: Option<&Path>,
) -> Result<TransferOutcome, DriverError> {
    let ham = cfg.hamiltonian()?;
    let target = ham.geometry().clone();
    let small = LatticeGeometry::new(source.lx, source.ly).map_err(|e| DriverError::Checkpoint(e.to_string()))?;
    let theta = transfer_params(&source.network, target_network, &source.theta, &small, &target)
        .map_err(DriverError::from_network)?;
    let state = make_state(target_network, theta.clone(), &target, source.sign_prior)?;
    let (row, configs) = estimate_energy(cfg, &state, &ham, 0)?;
    let ck = Checkpoint {
        network: target_network.clone(),
        lx: target.lx(),
        ly: target.ly(),
        sign_prior: source.sign_prior,
        theta,
        rng_seed: cfg.seed,
        rng_counter: 0,
        step: 0,
        chains: configs,
        provenance: format!(
            "transfer from {}x{} (step {}; {})",
            source.lx, source.ly, source.step, source.provenance
        ),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| DriverError::io(dir, e))?;
        ck.save(&dir.join(CHECKPOINT_FILE))?;
        write_log(&dir.join("transfer.csv"), std::slice::from_ref(&row))?;
    }
    Ok(TransferOutcome {
        checkpoint: ck,
        initial_estimate: row,
    })
}

#[derive(Debug, Clone)]
pub struct SelectOutcome {
    pub checkpoint: Checkpoint,
    pub selection: Selection,
}

/// Draws `k` random initializations and keeps the best (θ, S) pair.
pub fn select_init(cfg: &RunConfig, k: usize, out_dir: Option<&Path>) -> Result<SelectOutcome, DriverError> {
    cfg.validate()?;
    if k == 0 {
        return Err(DriverError::Config("select-init needs k >= 1".into()));
    }
    let ham = cfg.hamiltonian()?;
    let geom = ham.geometry().clone();
    let sign_prior = cfg.use_sign_prior();
    let networks: Vec<NetworkConfig> = (0..k)
        .map(|c| NetworkConfig {
            seed: cfg.network.seed.wrapping_add(c as u64),
            ..cfg.network.clone()
        })
        .collect();
    let states = networks
        .iter()
        .map(|n| {
            let theta = Cnn::new(n.clone()).map_err(DriverError::from_network)?.init_params();
            make_state(n, theta, &geom, sign_prior)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pool = thread_pool(cfg.workers)?;
    let scfg = cfg.sampler_config();
    let window = cfg.selection.window();
    let selection = pool
        .install(|| select_initial_state(&states, &ham, &scfg, &window))
        .map_err(|e| DriverError::from_sampler(e, 0))?;
    let winner = &states[selection.candidate];
    let ck = Checkpoint {
        network: networks[selection.candidate].clone(),
        lx: geom.lx(),
        ly: geom.ly(),
        sign_prior,
        theta: winner.params().clone(),
        rng_seed: cfg.seed,
        rng_counter: 0,
        step: 0,
        chains: vec![selection.final_config.clone()],
        provenance: format!(
            "select-init k={} chains={} window=({}, {}) count={} winner=(candidate {}, chain {}) mean_energy_per_site={:.10}",
            k,
            scfg.n_chains,
            window.e_min,
            window.e_max,
            window.count,
            selection.candidate,
            selection.chain,
            selection.mean_energy
        ),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| DriverError::io(dir, e))?;
        ck.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(SelectOutcome {
        checkpoint: ck,
        selection,
    })
}
