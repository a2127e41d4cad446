//! End-to-end driver workflows: resume, transfer, selection.

use std::path::Path;

use nqs::driver::{
    read_log, select_init, state_from_checkpoint, train, transfer, Checkpoint, LatticeConfig, RunConfig,
    CHECKPOINT_FILE, LOG_FILE,
};
use nqs::hamiltonian::ModelSpec;
use nqs::network::{NetworkConfig, Wavefunction};
use nqs::oracle::{build_hamiltonian, enumerate_sector, rayleigh_quotient};
use nqs::sampler::SamplerConfig;

fn small(lx: usize, ly: usize, n_steps: usize) -> RunConfig {
    RunConfig {
        n_steps,
        seed: 9,
        checkpoint_every: 0,
        lattice: LatticeConfig { lx, ly },
        network: NetworkConfig {
            kernel_scale: 0.2,
            ..NetworkConfig::cnn1(1, 2)
        },
        sampler: SamplerConfig {
            n_chains: 8,
            samples_per_chain: 4,
            warmup_sweeps: 2,
            ..SamplerConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn resume_continues_the_same_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let full = train(&small(4, 4, 4), &dir.path().join("full")).unwrap();

    let half_dir = dir.path().join("half");
    train(&small(4, 4, 2), &half_dir).unwrap();
    let resumed = RunConfig {
        resume_from: Some(half_dir.join(CHECKPOINT_FILE)),
        ..small(4, 4, 4)
    };
    let out = train(&resumed, &half_dir).unwrap();

    assert_eq!(out.rows.len(), 4);
    for (a, b) in full.rows.iter().zip(&out.rows) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.e_mean_per_site, b.e_mean_per_site);
        assert_eq!(a.acceptance, b.acceptance);
    }
    assert_eq!(full.checkpoint.theta, out.checkpoint.theta);
    assert_eq!(full.checkpoint.chains, out.checkpoint.chains);
    assert_eq!(read_log(&half_dir.join(LOG_FILE)).unwrap().len(), 4);
}

#[test]
fn resume_rejects_a_different_lattice() {
    let dir = tempfile::tempdir().unwrap();
    train(&small(4, 4, 1), dir.path()).unwrap();
    let cfg = RunConfig {
        resume_from: Some(dir.path().join(CHECKPOINT_FILE)),
        ..small(6, 6, 2)
    };
    let err = train(&cfg, &dir.path().join("b")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn zero_steps_logs_the_initial_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small(4, 4, 0), dir.path()).unwrap();
    assert_eq!(out.rows.len(), 1);
    assert_eq!(out.rows[0].step, 0);
    assert!(out.rows[0].sr_residual.is_nan());
    assert_eq!(out.checkpoint.step, 0);
    let ck = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck, out.checkpoint);
}

#[test]
fn transfer_keeps_parameters_and_same_size_keeps_amplitudes() {
    let dir = tempfile::tempdir().unwrap();
    let src = train(&small(4, 4, 2), &dir.path().join("src")).unwrap();

    let same = transfer(&small(4, 4, 0), &src.checkpoint, &src.checkpoint.network, None).unwrap();
    assert_eq!(same.checkpoint.theta, src.checkpoint.theta);
    let a = state_from_checkpoint(&src.checkpoint).unwrap();
    let b = state_from_checkpoint(&same.checkpoint).unwrap();
    for s in &src.checkpoint.chains {
        assert_eq!(a.amplitude(s).unwrap(), b.amplitude(s).unwrap());
    }

    let big_dir = dir.path().join("big");
    let big = transfer(
        &small(6, 6, 0),
        &src.checkpoint,
        &src.checkpoint.network,
        Some(&big_dir),
    )
    .unwrap();
    assert_eq!(big.checkpoint.theta, src.checkpoint.theta);
    assert_eq!((big.checkpoint.lx, big.checkpoint.ly), (6, 6));
    assert!(big.initial_estimate.e_mean_per_site.is_finite());
    assert!(big_dir.join(CHECKPOINT_FILE).exists());
    assert!(big_dir.join("transfer.csv").exists());
}

fn chain_step(from: &Path, lx: usize, steps: usize, dir: &Path) -> Checkpoint {
    let source = Checkpoint::load(from).unwrap();
    transfer(&small(lx, lx, 0), &source, &source.network, Some(dir)).unwrap();
    let cfg = RunConfig {
        resume_from: Some(dir.join(CHECKPOINT_FILE)),
        ..small(lx, lx, steps)
    };
    train(&cfg, dir).unwrap().checkpoint
}

#[test]
fn chained_transfer_four_six_eight() {
    let dir = tempfile::tempdir().unwrap();
    let d4 = dir.path().join("l4");
    train(&small(4, 4, 2), &d4).unwrap();
    let d6 = dir.path().join("l6");
    let c6 = chain_step(&d4.join(CHECKPOINT_FILE), 6, 1, &d6);
    assert_eq!((c6.lx, c6.step), (6, 1));
    let c8 = chain_step(&d6.join(CHECKPOINT_FILE), 8, 1, &dir.path().join("l8"));
    assert_eq!((c8.lx, c8.step), (8, 1));
    assert!(c8.provenance.contains("transfer from 6x6"));
    assert!(c8.theta.is_finite());
}

#[test]
fn selection_is_deterministic_and_k1_works() {
    let cfg = RunConfig {
        model: ModelSpec::tj(1.0, 0.4, 0.125),
        selection: nqs::driver::SelectionConfig {
            e_min: -10.0,
            e_max: 10.0,
            count: 4,
            ..Default::default()
        },
        ..small(4, 4, 0)
    };
    let a = select_init(&cfg, 3, None).unwrap();
    let b = select_init(&cfg, 3, None).unwrap();
    assert_eq!(a.selection, b.selection);
    assert_eq!(a.checkpoint, b.checkpoint);
    assert_eq!(a.selection.candidate_scores.len(), 3);
    let best = a
        .selection
        .candidate_scores
        .iter()
        .flatten()
        .fold(f64::INFINITY, |m, &x| m.min(x));
    assert_eq!(best, a.selection.mean_energy);

    let one = select_init(&cfg, 1, None).unwrap();
    assert_eq!(one.selection.candidate, 0);
    assert_eq!(one.checkpoint.chains.len(), 1);
    assert!(select_init(&cfg, 0, None).is_err());
}

#[test]
fn selected_checkpoint_seeds_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        selection: nqs::driver::SelectionConfig {
            e_min: -10.0,
            e_max: 10.0,
            count: 4,
            ..Default::default()
        },
        ..small(4, 4, 0)
    };
    select_init(&cfg, 2, Some(dir.path())).unwrap();
    let run = RunConfig {
        resume_from: Some(dir.path().join(CHECKPOINT_FILE)),
        ..small(4, 4, 2)
    };
    let out = train(&run, &dir.path().join("train")).unwrap();
    assert_eq!(out.rows.len(), 2);
    assert_eq!(out.checkpoint.chains.len(), 8);
}

#[test]
fn short_training_lowers_the_exact_energy_on_2x4() {
    let run = RunConfig {
        lattice: LatticeConfig { lx: 4, ly: 2 },
        sampler: SamplerConfig {
            n_chains: 32,
            samples_per_chain: 16,
            warmup_sweeps: 5,
            ..SamplerConfig::default()
        },
        sr: nqs::optimizer::SrConfig {
            lambda: 0.1,
            ..Default::default()
        },
        ..small(4, 2, 30)
    };
    let dir = tempfile::tempdir().unwrap();
    let ham = run.hamiltonian().unwrap();
    let basis = enumerate_sector(&ham).unwrap();
    let h = build_hamiltonian(&ham, &basis).unwrap();
    let init = train(
        &RunConfig {
            n_steps: 0,
            ..run.clone()
        },
        &dir.path().join("a"),
    )
    .unwrap();
    let before = rayleigh_quotient(&basis, &h, &state_from_checkpoint(&init.checkpoint).unwrap()).unwrap();
    let out = train(&run, &dir.path().join("b")).unwrap();
    let after = rayleigh_quotient(&basis, &h, &state_from_checkpoint(&out.checkpoint).unwrap()).unwrap();
    assert!(after < before, "{before} -> {after}");
}
