//! Parallel Metropolis chains over `|W(S)|^2`.
//!
//! Every chain draws from its own RNG stream keyed by `(seed, round, chain)`,
//! so results do not depend on how chains are spread over worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hamiltonian::{Hamiltonian, HamiltonianError};
use crate::lattice::{Configuration, LatticeGeometry};
use crate::network::{Amplitude, Differentiable, NetworkError, Wavefunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("chain {chain} starts on a configuration with zero amplitude; reseed it")]
    ZeroStart { chain: usize },
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("initial-state selection failed: every candidate was disqualified")]
    SelectionFailed,
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Burn-in length in sweeps of `n_sites` proposals, applied to fresh chains.
    pub warmup_sweeps: usize,
    /// Proposals between recorded samples; `None` means one sweep.
    pub gap: Option<usize>,
    pub samples_per_chain: usize,
    /// Stream seed; filled from the run seed rather than the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 64,
            warmup_sweeps: 10,
            gap: None,
            samples_per_chain: 16,
            seed: 7,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_chains == 0 || self.samples_per_chain == 0 || self.gap == Some(0) {
            return Err(SamplerError::InvalidConfig(
                "n_chains, samples_per_chain and gap must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn gap_for(&self, n_sites: usize) -> usize {
        self.gap.unwrap_or(n_sites)
    }

    pub fn n_samples(&self) -> usize {
        self.n_chains * self.samples_per_chain
    }
}

/// Per-sample local energies and log-derivatives in chain-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub e_loc: Vec<f64>,
    /// Row-major `[n_samples, n_params]`.
    pub o_loc: Vec<f64>,
    pub n_params: usize,
    pub acceptance_rate: f64,
    /// Final configuration of every chain.
    pub configs: Vec<Configuration>,
}

impl SampleBatch {
    pub fn n_samples(&self) -> usize {
        self.e_loc.len()
    }

    pub fn o_row(&self, i: usize) -> &[f64] {
        &self.o_loc[i * self.n_params..(i + 1) * self.n_params]
    }
}

/// Independent stream for one chain in one sampling round.
pub fn chain_rng(seed: u64, round: u64, chain: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&round.to_le_bytes());
    key[16..24].copy_from_slice(&(chain as u64).to_le_bytes());
    key[24..].copy_from_slice(b"nqs-mcmc");
    ChaCha8Rng::from_seed(key)
}

/// Picks a nearest-neighbour bond uniformly and returns it when the two site
/// values differ; equal values are a self-proposal (`None`).
pub fn propose_move<R: Rng + ?Sized>(geom: &LatticeGeometry, s: &Configuration, rng: &mut R) -> Option<(usize, usize)> {
    let bonds = geom.nn_bonds();
    let (i, j) = bonds[rng.random_range(0..bonds.len())];
    (s.get(i) != s.get(j)).then_some((i, j))
}

/// A Markov chain's current configuration with its cached amplitude.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub config: Configuration,
    pub amplitude: Amplitude,
}

impl ChainState {
    pub fn new<W: Wavefunction + ?Sized>(config: Configuration, psi: &W) -> Result<Self, NetworkError> {
        let amplitude = psi.amplitude(&config)?;
        Ok(Self { config, amplitude })
    }
}

/// `min(1, |W(S')/W(S)|^2)` for a move from `current` to `proposed`.
pub fn acceptance_probability(current: Amplitude, proposed: Amplitude) -> f64 {
    if proposed.is_zero() {
        return 0.0;
    }
    let log_ratio = 2.0 * (proposed.log_abs - current.log_abs);
    if log_ratio >= 0.0 {
        1.0
    } else {
        log_ratio.exp()
    }
}

/// One Metropolis update: accept the proposal with probability
/// [`acceptance_probability`]. Returns whether the state changed.
pub fn metropolis_step<W: Wavefunction + ?Sized, R: Rng + ?Sized>(
    psi: &W,
    geom: &LatticeGeometry,
    state: &mut ChainState,
    rng: &mut R,
) -> Result<bool, NetworkError> {
    let Some((i, j)) = propose_move(geom, &state.config, rng) else {
        return Ok(false);
    };
    state.config.swap(i, j);
    let proposed = psi.amplitude(&state.config)?;
    let p = acceptance_probability(state.amplitude, proposed);
    let accept = p >= 1.0 || (p > 0.0 && rng.random::<f64>() < p);
    if accept {
        state.amplitude = proposed;
    } else {
        state.config.swap(i, j);
    }
    Ok(accept)
}

/// Records configurations only: `samples_per_chain` per chain, `gap`
/// proposals apart, after `warmup` proposals. Returns the samples in
/// chain-major order and the fraction of state-changing proposals.
pub fn sample_configurations<W: Wavefunction + ?Sized>(
    cfg: &SamplerConfig,
    psi: &W,
    geom: &LatticeGeometry,
    starts: &[Configuration],
    round: u64,
    warmup: usize,
) -> Result<(Vec<Configuration>, f64), SamplerError> {
    cfg.validate()?;
    let gap = cfg.gap_for(geom.n_sites());
    let per_chain: Vec<Result<(Vec<Configuration>, usize), SamplerError>> = starts
        .par_iter()
        .enumerate()
        .map(|(chain, start)| {
            let mut rng = chain_rng(cfg.seed, round, chain);
            let mut state = ChainState::new(start.clone(), psi)?;
            if state.amplitude.is_zero() {
                return Err(SamplerError::ZeroStart { chain });
            }
            let mut accepted = 0;
            advance(psi, geom, &mut state, warmup, &mut rng, &mut accepted)?;
            let mut out = Vec::with_capacity(cfg.samples_per_chain);
            for _ in 0..cfg.samples_per_chain {
                advance(psi, geom, &mut state, gap, &mut rng, &mut accepted)?;
                out.push(state.config.clone());
            }
            Ok((out, accepted))
        })
        .collect();
    let mut samples = Vec::with_capacity(starts.len() * cfg.samples_per_chain);
    let mut accepted = 0;
    for r in per_chain {
        let (s, a) = r?;
        samples.extend(s);
        accepted += a;
    }
    let proposals = starts.len() * (warmup + cfg.samples_per_chain * gap);
    Ok((samples, accepted as f64 / proposals.max(1) as f64))
}

/// Fresh random sector configurations for `n` chains.
pub fn initial_configs(ham: &Hamiltonian, seed: u64, n: usize) -> Vec<Configuration> {
    (0..n)
        .map(|c| {
            let mut rng = chain_rng(seed, u64::MAX, c);
            ham.sector().random_config(&mut rng)
        })
        .collect()
}

fn advance<W: Wavefunction + ?Sized>(
    psi: &W,
    geom: &LatticeGeometry,
    state: &mut ChainState,
    steps: usize,
    rng: &mut ChaCha8Rng,
    accepted: &mut usize,
) -> Result<(), NetworkError> {
    for _ in 0..steps {
        if metropolis_step(psi, geom, state, rng)? {
            *accepted += 1;
        }
    }
    Ok(())
}

struct ChainOutput {
    e: Vec<f64>,
    o: Vec<f64>,
    accepted: usize,
    final_config: Configuration,
}

/// Runs every chain from `starts` and records `samples_per_chain` samples each.
///
/// `warmup` proposals are spent before the first sample; afterwards a sample is
/// taken every `gap` proposals. With `with_derivatives` each sample also gets
/// one backward pass written into the chain's rows of `o_loc`.
pub fn run_chains<W: Differentiable + ?Sized>(
    cfg: &SamplerConfig,
    psi: &W,
    ham: &Hamiltonian,
    starts: &[Configuration],
    round: u64,
    warmup: usize,
    with_derivatives: bool,
) -> Result<SampleBatch, SamplerError> {
    cfg.validate()?;
    if starts.len() != cfg.n_chains {
        return Err(SamplerError::InvalidConfig(format!(
            "{} start configurations for {} chains",
            starts.len(),
            cfg.n_chains
        )));
    }
    let geom = ham.geometry();
    let gap = cfg.gap_for(geom.n_sites());
    let per = cfg.samples_per_chain;
    let n_params = if with_derivatives { psi.n_params() } else { 0 };
    let outputs: Vec<Result<ChainOutput, SamplerError>> = starts
        .par_iter()
        .enumerate()
        .map(|(chain, start)| {
            ham.sector().check(start).map_err(HamiltonianError::from)?;
            let mut rng = chain_rng(cfg.seed, round, chain);
            let mut state = ChainState::new(start.clone(), psi)?;
            if state.amplitude.is_zero() {
                return Err(SamplerError::ZeroStart { chain });
            }
            let mut accepted = 0;
            advance(psi, geom, &mut state, warmup, &mut rng, &mut accepted)?;
            let mut e = Vec::with_capacity(per);
            let mut o = vec![0.0; per * n_params];
            for k in 0..per {
                advance(psi, geom, &mut state, gap, &mut rng, &mut accepted)?;
                e.push(ham.local_energy_with(&state.config, state.amplitude, psi)?);
                if n_params > 0 {
                    psi.log_derivative(&state.config, &mut o[k * n_params..(k + 1) * n_params])?;
                }
            }
            Ok(ChainOutput {
                e,
                o,
                accepted,
                final_config: state.config,
            })
        })
        .collect();

    let mut e_loc = Vec::with_capacity(cfg.n_samples());
    let mut o_loc = Vec::with_capacity(cfg.n_samples() * n_params);
    let mut configs = Vec::with_capacity(cfg.n_chains);
    let mut accepted = 0usize;
    for out in outputs {
        let out = out?;
        e_loc.extend(out.e);
        o_loc.extend(out.o);
        accepted += out.accepted;
        configs.push(out.final_config);
    }
    let proposals = cfg.n_chains * (warmup + per * gap);
    Ok(SampleBatch {
        e_loc,
        o_loc,
        n_params,
        acceptance_rate: accepted as f64 / proposals.max(1) as f64,
        configs,
    })
}

/// Energy window and record count for initial-state selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionWindow {
    /// Bounds on the local energy per site.
    pub e_min: f64,
    pub e_max: f64,
    /// In-window records averaged per chain.
    pub count: usize,
    /// Proposals between records; `None` means one sweep.
    pub gap: Option<usize>,
    /// Give up on a chain after this many records outside the window.
    pub max_rejected: usize,
}

impl Default for SelectionWindow {
    fn default() -> Self {
        Self {
            e_min: -10.0,
            e_max: 0.0,
            count: 100,
            gap: None,
            max_rejected: 1000,
        }
    }
}

/// The winning (parameters, chain) pair of a selection run.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidate: usize,
    pub chain: usize,
    /// Average in-window local energy per site of the winning chain.
    pub mean_energy: f64,
    pub initial_config: Configuration,
    pub final_config: Configuration,
    /// Best chain average per candidate (`None` when disqualified).
    pub candidate_scores: Vec<Option<f64>>,
}

/// Runs `cfg.n_chains` chains for every candidate and keeps the
/// (candidate, initial configuration) pair with the lowest average in-window
/// energy.
pub fn select_initial_state<W: Wavefunction>(
    candidates: &[W],
    ham: &Hamiltonian,
    cfg: &SamplerConfig,
    window: &SelectionWindow,
) -> Result<Selection, SamplerError> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(SamplerError::InvalidConfig("no candidates".into()));
    }
    if !(window.e_min < window.e_max) || window.count == 0 {
        return Err(SamplerError::InvalidConfig("empty energy window".into()));
    }
    let geom = ham.geometry();
    let n = geom.n_sites();
    let gap = window.gap.unwrap_or(n);
    let warmup = cfg.warmup_sweeps * n;
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|k| (0..cfg.n_chains).map(move |c| (k, c)))
        .collect();
    let results: Vec<Result<Option<(f64, Configuration, Configuration)>, SamplerError>> = jobs
        .par_iter()
        .map(|&(k, c)| {
            let psi = &candidates[k];
            let stream = (k * cfg.n_chains + c) as u64;
            let mut rng = chain_rng(cfg.seed, stream, usize::MAX);
            let start = ham.sector().random_config(&mut rng);
            let mut state = ChainState::new(start.clone(), psi)?;
            if state.amplitude.is_zero() {
                return Ok(None);
            }
            let mut accepted = 0;
            advance(psi, geom, &mut state, warmup, &mut rng, &mut accepted)?;
            let (mut sum, mut kept, mut rejected) = (0.0, 0usize, 0usize);
            while kept < window.count {
                advance(psi, geom, &mut state, gap, &mut rng, &mut accepted)?;
                let e = ham.local_energy_with(&state.config, state.amplitude, psi)? / n as f64;
                if e > window.e_min && e < window.e_max {
                    sum += e;
                    kept += 1;
                } else {
                    rejected += 1;
                    if rejected > window.max_rejected {
                        return Ok(None);
                    }
                }
            }
            Ok(Some((sum / kept as f64, start, state.config)))
        })
        .collect();

    let mut best: Option<Selection> = None;
    let mut scores = vec![None::<f64>; candidates.len()];
    for (&(k, c), r) in jobs.iter().zip(results) {
        let Some((mean, start, last)) = r? else { continue };
        if scores[k].is_none_or(|s| mean < s) {
            scores[k] = Some(mean);
        }
        if best.as_ref().is_none_or(|b| mean < b.mean_energy) {
            best = Some(Selection {
                candidate: k,
                chain: c,
                mean_energy: mean,
                initial_config: start,
                final_config: last,
                candidate_scores: Vec::new(),
            });
        }
    }
    let mut best = best.ok_or(SamplerError::SelectionFailed)?;
    best.candidate_scores = scores;
    Ok(best)
}
