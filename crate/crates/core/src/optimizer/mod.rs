//! Stochastic reconfiguration.
//!
//! Samples enter as a centered, weight-scaled matrix `Ō` (`n × R`) so that
//! `S = ŌᵀŌ` and `F = Ōᵀẽ` with `ẽ_i = √w_i (E_i − ⟨E⟩)`. Uniform batches use
//! `w_i = 1/n`; exact expectations over an enumerated sector use `|ψ|²`.

mod mesh;

pub use mesh::{block_exchange_pairs, distributed_sr, MeshResult};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampler::SampleBatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SrError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid SR configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("factorization failed after {retries} shift increases")]
    FactorizationFailed { retries: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("mesh size {0} is not a perfect square")]
    NotPerfectSquare(usize),
    #[error("mesh worker failed: {0}")]
    Mesh(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SrSolver {
    Cholesky,
    #[serde(alias = "cg")]
    ConjugateGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrConfig {
    pub eta: f64,
    pub lambda: f64,
    pub solver: SrSolver,
    /// Worker-grid size of the distributed solve; must be a perfect square.
    pub mesh_p: usize,
    pub cg_max_iter: usize,
    pub max_retries: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            lambda: 1e-3,
            solver: SrSolver::Cholesky,
            mesh_p: 1,
            cg_max_iter: 2000,
            max_retries: 3,
        }
    }
}

/// Smallest admissible diagonal mean when scaling the shift.
pub const SHIFT_FLOOR: f64 = 1e-12;
/// Largest accepted relative residual `‖S_reg δ − F‖ / ‖F‖`.
pub const RESIDUAL_TOL: f64 = 1e-8;

impl SrConfig {
    pub fn validate(&self) -> Result<(), SrError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(SrError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(SrError::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        mesh_side(self.mesh_p)?;
        Ok(())
    }
}

pub(crate) fn mesh_side(p: usize) -> Result<usize, SrError> {
    let q = (p as f64).sqrt().round() as usize;
    if p == 0 || q * q != p {
        return Err(SrError::NotPerfectSquare(p));
    }
    Ok(q)
}

/// Centered sample statistics; `S` is formed on demand.
#[derive(Debug, Clone)]
pub struct SrStats {
    /// `√w_i (O_i − ⟨O⟩)`, `n × R`.
    pub centered: DMatrix<f64>,
    /// `√w_i (E_i − ⟨E⟩)`.
    pub e_centered: DVector<f64>,
    pub o_mean: DVector<f64>,
    pub e_mean: f64,
    pub e_err: f64,
}

pub(crate) fn weighted_means(e: &[f64], o: &[f64], r: usize, w: &[f64]) -> (f64, Vec<f64>) {
    let mut e_mean = 0.0;
    let mut o_mean = vec![0.0; r];
    for (i, &wi) in w.iter().enumerate() {
        e_mean += wi * e[i];
        for (m, x) in o_mean.iter_mut().zip(&o[i * r..(i + 1) * r]) {
            *m += wi * x;
        }
    }
    (e_mean, o_mean)
}

pub(crate) fn center_rows(
    o: &[f64],
    r: usize,
    w: &[f64],
    o_mean: &[f64],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> DMatrix<f64> {
    let nr = rows.len();
    let nc = cols.len();
    let mut out = DMatrix::zeros(nr, nc);
    for (li, i) in rows.enumerate() {
        let sw = w[i].sqrt();
        for (lj, j) in cols.clone().enumerate() {
            out[(li, lj)] = sw * (o[i * r + j] - o_mean[j]);
        }
    }
    out
}

impl SrStats {
    pub fn n_params(&self) -> usize {
        self.centered.ncols()
    }

    /// `S = ŌᵀŌ`, symmetric by construction.
    pub fn s_matrix(&self) -> DMatrix<f64> {
        gram(&self.centered, &self.centered)
    }

    pub fn f_vector(&self) -> DVector<f64> {
        self.centered.tr_mul(&self.e_centered)
    }
}

pub(crate) fn gram(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.tr_mul(b)
}

/// Statistics of a Monte Carlo batch with uniform weights.
pub fn build_sr_stats(batch: &SampleBatch) -> Result<SrStats, SrError> {
    let n = batch.n_samples();
    let w = vec![1.0 / n.max(1) as f64; n];
    build_weighted_stats(&batch.e_loc, &batch.o_loc, batch.n_params, &w)
}

/// Statistics with explicit non-negative weights summing to one.
pub fn build_weighted_stats(e: &[f64], o: &[f64], r: usize, w: &[f64]) -> Result<SrStats, SrError> {
    let n = e.len();
    if n < 2 {
        return Err(SrError::TooFewSamples(n));
    }
    if o.len() != n * r || w.len() != n {
        return Err(SrError::ShapeMismatch(format!(
            "{n} energies, {} derivative entries for {r} parameters, {} weights",
            o.len(),
            w.len()
        )));
    }
    if !e.iter().chain(o).all(|x| x.is_finite()) {
        return Err(SrError::NonFinite("sample statistics"));
    }
    let (e_mean, o_mean) = weighted_means(e, o, r, w);
    let centered = center_rows(o, r, w, &o_mean, 0..n, 0..r);
    let e_centered = DVector::from_iterator(n, (0..n).map(|i| w[i].sqrt() * (e[i] - e_mean)));
    let var: f64 = e_centered.iter().map(|x| x * x).sum();
    let n_eff = w.iter().filter(|&&x| x > 0.0).count().max(1);
    Ok(SrStats {
        centered,
        e_centered,
        o_mean: DVector::from_vec(o_mean),
        e_mean,
        e_err: (var / n_eff as f64).sqrt(),
    })
}

/// In-place lower Cholesky factor of a symmetric matrix; only the lower
/// triangle is read. Returns `false` on a non-positive pivot.
pub fn potrf(a: &mut DMatrix<f64>) -> bool {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let data = a.as_mut_slice();
    for j in 0..n {
        let (done, rest) = data.split_at_mut(j * n);
        let col_j = &mut rest[..n];
        for k in 0..j {
            let col_k = &done[k * n..(k + 1) * n];
            let l_jk = col_k[j];
            if l_jk != 0.0 {
                for (x, y) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                    *x -= l_jk * y;
                }
            }
        }
        let d = col_j[j];
        if !(d > 0.0 && d.is_finite()) {
            return false;
        }
        let d = d.sqrt();
        col_j[j] = d;
        let inv = 1.0 / d;
        for x in &mut col_j[j + 1..] {
            *x *= inv;
        }
        for x in &mut col_j[..j] {
            *x = 0.0;
        }
    }
    true
}

/// `L Lᵀ x = b` given the lower factor.
pub(crate) fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = forward_solve(l, b);
    backward_solve(l, &y)
}

pub(crate) fn forward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b).expect("positive diagonal")
}

pub(crate) fn backward_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.tr_solve_lower_triangular(b).expect("positive diagonal")
}

pub(crate) fn diagonal_sum(a: &DMatrix<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..a.nrows().min(a.ncols()) {
        s += a[(i, i)];
    }
    s
}

pub(crate) fn shift_for(lambda: f64, diag_mean: f64, attempt: usize) -> f64 {
    lambda * 10f64.powi(attempt as i32) * diag_mean.max(SHIFT_FLOOR)
}

pub(crate) fn relative_residual(r2: f64, f2: f64) -> f64 {
    if f2 == 0.0 {
        r2.sqrt()
    } else {
        (r2 / f2).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrSolution {
    pub delta: DVector<f64>,
    /// Relative residual of the accepted solve.
    pub residual: f64,
    /// Absolute diagonal shift that was applied.
    pub shift: f64,
    pub retries: usize,
}

/// Solves `(S + shift·I) δ = F`.
pub fn solve_delta(stats: &SrStats, cfg: &SrConfig) -> Result<SrSolution, SrError> {
    cfg.validate()?;
    match cfg.solver {
        SrSolver::Cholesky => solve_dense(&stats.s_matrix(), &stats.f_vector(), cfg),
        SrSolver::ConjugateGradient => solve_cg(stats, cfg),
    }
}

/// Dense path on an explicit matrix.
pub fn solve_dense(s: &DMatrix<f64>, f: &DVector<f64>, cfg: &SrConfig) -> Result<SrSolution, SrError> {
    if s.nrows() != f.len() || !s.is_square() {
        return Err(SrError::ShapeMismatch(format!(
            "S is {}x{}, F has {}",
            s.nrows(),
            s.ncols(),
            f.len()
        )));
    }
    let r = f.len();
    let diag_mean = diagonal_sum(s) / r.max(1) as f64;
    let f2 = f.norm_squared();
    for attempt in 0..=cfg.max_retries {
        let shift = shift_for(cfg.lambda, diag_mean, attempt);
        let mut reg = s.clone();
        for i in 0..r {
            reg[(i, i)] += shift;
        }
        let mut l = reg.clone();
        if !potrf(&mut l) {
            continue;
        }
        let delta = cholesky_solve(&l, f);
        let res = &reg * &delta - f;
        let residual = relative_residual(res.norm_squared(), f2);
        if delta.iter().all(|x| x.is_finite()) && residual < RESIDUAL_TOL {
            return Ok(SrSolution {
                delta,
                residual,
                shift,
                retries: attempt,
            });
        }
    }
    Err(SrError::FactorizationFailed {
        retries: cfg.max_retries,
    })
}

/// Conjugate gradient on `ŌᵀŌ + shift·I` without forming `S`.
fn solve_cg(stats: &SrStats, cfg: &SrConfig) -> Result<SrSolution, SrError> {
    let ob = &stats.centered;
    let f = stats.f_vector();
    let r = f.len();
    let mut diag = 0.0;
    for j in 0..r {
        diag += ob.column(j).norm_squared();
    }
    let diag_mean = diag / r.max(1) as f64;
    let f2 = f.norm_squared();
    let apply = |v: &DVector<f64>, shift: f64| -> DVector<f64> {
        let t = ob * v;
        let mut out = ob.tr_mul(&t);
        out.axpy(shift, v, 1.0);
        out
    };
    for attempt in 0..=cfg.max_retries {
        let shift = shift_for(cfg.lambda, diag_mean, attempt);
        let mut x = DVector::zeros(r);
        if f2 == 0.0 {
            return Ok(SrSolution {
                delta: x,
                residual: 0.0,
                shift,
                retries: attempt,
            });
        }
        let target = (0.01 * RESIDUAL_TOL).powi(2) * f2;
        let mut res = f.clone();
        let mut p = res.clone();
        let mut rr = res.norm_squared();
        for _ in 0..cfg.cg_max_iter {
            let ap = apply(&p, shift);
            let pap = p.dot(&ap);
            if !(pap > 0.0) {
                break;
            }
            let alpha = rr / pap;
            x.axpy(alpha, &p, 1.0);
            res.axpy(-alpha, &ap, 1.0);
            let rr_new = res.norm_squared();
            if rr_new <= target {
                break;
            }
            p *= rr_new / rr;
            p += &res;
            rr = rr_new;
        }
        let true_res = apply(&x, shift) - &f;
        let residual = relative_residual(true_res.norm_squared(), f2);
        if x.iter().all(|v| v.is_finite()) && residual < RESIDUAL_TOL {
            return Ok(SrSolution {
                delta: x,
                residual,
                shift,
                retries: attempt,
            });
        }
    }
    Err(SrError::FactorizationFailed {
        retries: cfg.max_retries,
    })
}

/// `θ ← θ − η δ`.
pub fn apply_update(theta: &mut [f64], delta: &[f64], eta: f64) -> Result<(), SrError> {
    if theta.len() != delta.len() {
        return Err(SrError::ShapeMismatch(format!(
            "{} parameters, {} updates",
            theta.len(),
            delta.len()
        )));
    }
    if !delta.iter().all(|x| x.is_finite()) {
        return Err(SrError::NonFinite("update vector"));
    }
    for (t, d) in theta.iter_mut().zip(delta) {
        *t -= eta * d;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn random_batch(n: usize, r: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let o = (0..n * r).map(|_| rng.random_range(-1.0..1.0)).collect();
        (e, o)
    }

    #[test]
    fn identical_rows_give_zero_statistics() {
        let o = vec![0.3, -1.2, 0.3, -1.2, 0.3, -1.2];
        let stats = build_weighted_stats(&[1.0, 2.0, 3.0], &o, 2, &uniform(3)).unwrap();
        assert!(stats.s_matrix().iter().all(|&x| x == 0.0));
        assert!(stats.f_vector().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn two_sample_hand_example() {
        let stats = build_weighted_stats(&[1.0, -1.0], &[1.0, -1.0], 1, &uniform(2)).unwrap();
        assert!((stats.s_matrix()[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((stats.f_vector()[0] - 1.0).abs() < 1e-15);
        assert!(stats.e_mean.abs() < 1e-15);
        assert!(matches!(
            build_weighted_stats(&[1.0], &[1.0], 1, &[1.0]),
            Err(SrError::TooFewSamples(1))
        ));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let (n, r) = (37, 9);
        let (e, o) = random_batch(n, r, 3);
        let stats = build_weighted_stats(&e, &o, r, &uniform(n)).unwrap();
        let s = stats.s_matrix();
        let f = stats.f_vector();
        let nf = n as f64;
        let mean = |k: usize| (0..n).map(|i| o[i * r + k]).sum::<f64>() / nf;
        let e_mean = e.iter().sum::<f64>() / nf;
        for k in 0..r {
            for l in 0..r {
                let oo = (0..n).map(|i| o[i * r + k] * o[i * r + l]).sum::<f64>() / nf;
                assert!((s[(k, l)] - (oo - mean(k) * mean(l))).abs() < 1e-12);
                assert_eq!(s[(k, l)], s[(l, k)]);
            }
            let eo = (0..n).map(|i| e[i] * o[i * r + k]).sum::<f64>() / nf;
            assert!((f[k] - (eo - e_mean * mean(k))).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_pure_shift_systems() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let cfg = SrConfig {
            lambda: 0.0,
            ..SrConfig::default()
        };
        let sol = solve_dense(&DMatrix::identity(3, 3), &v, &cfg).unwrap();
        assert_eq!(sol.delta, v);

        let cfg = SrConfig::default();
        let sol = solve_dense(&DMatrix::zeros(3, 3), &v, &cfg).unwrap();
        let expected = &v / (cfg.lambda * SHIFT_FLOOR);
        assert!(((&sol.delta - &expected).norm() / expected.norm()) < 1e-12);
    }

    #[test]
    fn singular_matrix_without_shift_fails() {
        let cfg = SrConfig {
            lambda: 0.0,
            ..SrConfig::default()
        };
        let f = DVector::from_vec(vec![1.0, 1.0]);
        let err = solve_dense(&DMatrix::zeros(2, 2), &f, &cfg).unwrap_err();
        assert_eq!(err, SrError::FactorizationFailed { retries: 3 });
    }

    #[test]
    fn potrf_reconstructs_and_rejects_indefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = DMatrix::from_fn(12, 12, |_, _| rng.random_range(-1.0..1.0));
        let spd = a.tr_mul(&a) + DMatrix::identity(12, 12);
        let mut l = spd.clone();
        assert!(potrf(&mut l));
        assert!((&l * l.transpose() - &spd).norm() < 1e-12);
        let mut bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(!potrf(&mut bad));
    }

    #[test]
    fn cg_agrees_with_cholesky() {
        let (n, r) = (80, 30);
        let (e, o) = random_batch(n, r, 5);
        let stats = build_weighted_stats(&e, &o, r, &uniform(n)).unwrap();
        let chol = solve_delta(&stats, &SrConfig::default()).unwrap();
        let cg = solve_delta(
            &stats,
            &SrConfig {
                solver: SrSolver::ConjugateGradient,
                ..SrConfig::default()
            },
        )
        .unwrap();
        assert!(cg.residual < RESIDUAL_TOL);
        assert!((&chol.delta - &cg.delta).norm() / chol.delta.norm() < 1e-8);
    }

    #[test]
    fn update_examples() {
        let mut theta = vec![0.0; 4];
        apply_update(&mut theta, &[1.0; 4], 0.05).unwrap();
        assert_eq!(theta, vec![-0.05; 4]);
        let before = theta.clone();
        apply_update(&mut theta, &[0.0; 4], 0.05).unwrap();
        apply_update(&mut theta, &[3.0; 4], 0.0).unwrap();
        assert_eq!(theta, before);
        assert!(apply_update(&mut theta, &[f64::NAN; 4], 0.05).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SrConfig::default().validate().is_ok());
        assert!(SrConfig {
            eta: 0.0,
            ..SrConfig::default()
        }
        .validate()
        .is_err());
        assert!(SrConfig {
            lambda: -1.0,
            ..SrConfig::default()
        }
        .validate()
        .is_err());
        assert_eq!(
            SrConfig {
                mesh_p: 8,
                ..SrConfig::default()
            }
            .validate(),
            Err(SrError::NotPerfectSquare(8))
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_spd_matches_direct_inverse(seed in 0u64..1000, r in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(r + 3, r, |_, _| rng.random_range(-1.0..1.0));
            let s = a.tr_mul(&a);
            let f = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
            let cfg = SrConfig::default();
            let sol = solve_dense(&s, &f, &cfg).unwrap();
            let mut reg = s.clone();
            for i in 0..r {
                reg[(i, i)] += sol.shift;
            }
            let direct = reg.try_inverse().unwrap() * &f;
            prop_assert!((&sol.delta - &direct).norm() / direct.norm() < 1e-10);
            prop_assert!(sol.residual < RESIDUAL_TOL);
        }

        #[test]
        fn covariance_is_symmetric_psd(seed in 0u64..1000) {
            let (e, o) = random_batch(20, 6, seed);
            let s = build_weighted_stats(&e, &o, 6, &uniform(20)).unwrap().s_matrix();
            prop_assert!((&s - s.transpose()).amax() < 1e-10);
            let eig = s.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&x| x > -1e-10));
        }
    }
}
