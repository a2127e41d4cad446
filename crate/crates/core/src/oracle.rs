//! Exact diagonalization on small lattices.
//!
//! The spin-language path builds `H` from [`Hamiltonian::connected`]. The
//! fermionic path works directly with creation and annihilation operators on
//! occupation bitmasks and shares no sign logic with the spin path.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hamiltonian::{Hamiltonian, HamiltonianError, ModelKind};
use crate::lattice::{Configuration, LatticeGeometry, SiteMode};
use crate::network::{Amplitude, Differentiable, NetworkError, Wavefunction};

/// Largest sector the oracle will enumerate.
pub const SECTOR_CAP: usize = 1_000_000;
/// Largest sector handed to the dense eigensolver.
pub const DENSE_CAP: usize = 5000;
/// Residual bound `‖Hψ − E0ψ‖` for an accepted ground state.
pub const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("sector dimension {dim} exceeds the cap {cap}")]
    CapExceeded { dim: u128, cap: usize },
    #[error("{0} sites do not fit the 64-bit basis key")]
    TooManySites(usize),
    #[error("Lanczos did not converge: residual {residual:e}")]
    NoConvergence { residual: f64 },
    #[error("wavefunction vanishes on the whole sector")]
    AllZero,
    #[error("fermionic ED needs a t-J model")]
    NotTJ,
    #[error(transparent)]
    Hamiltonian(#[from] HamiltonianError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// All configurations of a conserved sector in lexicographic order
/// (`−1 < 0 < +1`, site 0 most significant).
#[derive(Debug, Clone)]
pub struct SectorBasis {
    states: Vec<Configuration>,
    keys: Vec<u64>,
}

fn key_of(values: &[i8]) -> u64 {
    values.iter().fold(0u64, |k, &v| (k << 2) | (v + 1) as u64)
}

fn multinomial(n: usize, parts: &[usize]) -> u128 {
    let mut out: u128 = 1;
    let mut left = n;
    for &k in parts {
        // C(left, k), exact in u128 for the sizes involved before the cap trips.
        let mut c: u128 = 1;
        for i in 0..k {
            c = c * (left - i) as u128 / (i + 1) as u128;
        }
        out = out.saturating_mul(c);
        left -= k;
    }
    out
}

impl SectorBasis {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[Configuration] {
        &self.states
    }

    pub fn index_of(&self, s: &Configuration) -> Option<usize> {
        if s.len() > 32 {
            return None;
        }
        self.keys.binary_search(&key_of(s.values())).ok()
    }
}

/// Enumerates the sector of `ham`.
pub fn enumerate_sector(ham: &Hamiltonian) -> Result<SectorBasis, OracleError> {
    let sector = ham.sector();
    let n = sector.n_sites;
    let dim = multinomial(n, &[sector.n_up, sector.n_down]);
    if dim > SECTOR_CAP as u128 {
        return Err(OracleError::CapExceeded { dim, cap: SECTOR_CAP });
    }
    if n > 32 {
        return Err(OracleError::TooManySites(n));
    }
    let mut states = Vec::with_capacity(dim as usize);
    let mut keys = Vec::with_capacity(dim as usize);
    let mut buf = vec![0i8; n];
    // Remaining counts for −1, 0, +1.
    let mut left = [sector.n_down, sector.n_holes, sector.n_up];
    fn fill(
        site: usize,
        buf: &mut Vec<i8>,
        left: &mut [usize; 3],
        mode: SiteMode,
        states: &mut Vec<Configuration>,
        keys: &mut Vec<u64>,
    ) {
        if site == buf.len() {
            keys.push(key_of(buf));
            states.push(Configuration::new(buf.clone(), mode).expect("sector values match the mode"));
            return;
        }
        for (slot, v) in [(0usize, -1i8), (1, 0), (2, 1)] {
            if left[slot] > 0 {
                left[slot] -= 1;
                buf[site] = v;
                fill(site + 1, buf, left, mode, states, keys);
                left[slot] += 1;
            }
        }
    }
    fill(0, &mut buf, &mut left, sector.mode, &mut states, &mut keys);
    Ok(SectorBasis { states, keys })
}

/// Compressed-row symmetric operator.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    dim: usize,
    indptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl SparseOperator {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let dim = rows.len();
        let mut indptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let row_start = cols.len();
            for (c, v) in row {
                if cols.len() > row_start && cols[cols.len() - 1] as usize == c {
                    *vals.last_mut().expect("non-empty row") += v;
                } else {
                    cols.push(c as u32);
                    vals.push(v);
                }
            }
            indptr.push(cols.len());
        }
        Self {
            dim,
            indptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *yi = acc;
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = self.indptr[i]..self.indptr[i + 1];
        match self.cols[row.clone()].binary_search(&(j as u32)) {
            Ok(k) => self.vals[row.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for k in self.indptr[i]..self.indptr[i + 1] {
                m[(i, self.cols[k] as usize)] += self.vals[k];
            }
        }
        m
    }

    /// Largest `|H_ij − H_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.cols[k] as usize;
                worst = worst.max((self.vals[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn expectation(&self, psi: &[f64]) -> f64 {
        let mut hpsi = vec![0.0; self.dim];
        self.apply(psi, &mut hpsi);
        psi.iter().zip(&hpsi).map(|(a, b)| a * b).sum()
    }
}

/// `H` in the sector basis, assembled from the connected configurations.
pub fn build_hamiltonian(ham: &Hamiltonian, basis: &SectorBasis) -> Result<SparseOperator, OracleError> {
    let mut rows = Vec::with_capacity(basis.len());
    for s in basis.states() {
        let set = ham.connected(s)?;
        let mut row = Vec::with_capacity(set.offdiag.len() + 1);
        row.push((basis.index_of(s).expect("state is in its own basis"), set.diagonal));
        for (t, h) in &set.offdiag {
            let j = basis.index_of(t).expect("the Hamiltonian conserves the sector");
            row.push((j, *h));
        }
        rows.push(row);
    }
    Ok(SparseOperator::from_rows(rows))
}

/// Lowest eigenpair with a normalized, sign-fixed vector.
#[derive(Debug, Clone)]
pub struct GroundState {
    pub energy: f64,
    pub vector: DVector<f64>,
    /// `‖Hψ − Eψ‖`.
    pub residual: f64,
}

fn fix_gauge(v: &mut DVector<f64>) {
    let scale = v.amax();
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * scale) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
}

fn residual_of(h: &SparseOperator, v: &DVector<f64>, e: f64) -> f64 {
    let mut hv = vec![0.0; h.dim()];
    h.apply(v.as_slice(), &mut hv);
    hv.iter()
        .zip(v.iter())
        .map(|(a, b)| (a - e * b).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Lanczos with full reorthogonalization and explicit restarts until the
/// residual bound holds.
pub fn lanczos(h: &SparseOperator, seed: u64) -> Result<GroundState, OracleError> {
    let n = h.dim();
    if n == 0 {
        return Err(OracleError::AllZero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut start = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    start.normalize_mut();
    let m_max = n.min(250);
    let mut best_residual = f64::INFINITY;
    for _restart in 0..40 {
        let mut basis: Vec<DVector<f64>> = vec![start.clone()];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let mut w = vec![0.0; n];
        let mut ritz = None;
        for j in 0..m_max {
            h.apply(basis[j].as_slice(), &mut w);
            let mut wv = DVector::from_column_slice(&w);
            let a = basis[j].dot(&wv);
            alpha.push(a);
            wv.axpy(-a, &basis[j], 1.0);
            if j > 0 {
                wv.axpy(-beta[j - 1], &basis[j - 1], 1.0);
            }
            for _ in 0..2 {
                for v in &basis {
                    let c = v.dot(&wv);
                    wv.axpy(-c, v, 1.0);
                }
            }
            let b = wv.norm();
            let done = j + 1 == m_max || b < 1e-13;
            if done || j % 5 == 4 {
                let k = alpha.len();
                let t = DMatrix::from_fn(k, k, |r, c| {
                    if r == c {
                        alpha[r]
                    } else if r + 1 == c || c + 1 == r {
                        beta[r.min(c)]
                    } else {
                        0.0
                    }
                });
                let eig = SymmetricEigen::new(t);
                let (idx, &theta) = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|x, y| x.1.total_cmp(y.1))
                    .expect("non-empty");
                let y = eig.eigenvectors.column(idx).clone_owned();
                let estimate = b * y[k - 1].abs();
                ritz = Some((theta, y));
                if done || estimate < 1e-3 * EIGEN_TOL {
                    break;
                }
            }
            beta.push(b);
            basis.push(wv / b);
        }
        let (_, y) = ritz.expect("at least one Ritz pair");
        let mut psi = DVector::zeros(n);
        for (k, c) in y.iter().enumerate() {
            psi.axpy(*c, &basis[k], 1.0);
        }
        psi.normalize_mut();
        let energy = h.expectation(psi.as_slice());
        let residual = residual_of(h, &psi, energy);
        if residual < EIGEN_TOL {
            fix_gauge(&mut psi);
            return Ok(GroundState {
                energy,
                vector: psi,
                residual,
            });
        }
        best_residual = best_residual.min(residual);
        start = psi;
    }
    Err(OracleError::NoConvergence {
        residual: best_residual,
    })
}

/// Full spectrum in ascending order plus eigenvectors, for small sectors.
pub fn dense_diagonalize(h: &SparseOperator) -> Result<(Vec<f64>, DMatrix<f64>), OracleError> {
    if h.dim() > DENSE_CAP {
        return Err(OracleError::CapExceeded {
            dim: h.dim() as u128,
            cap: DENSE_CAP,
        });
    }
    let eig = SymmetricEigen::new(h.to_dense());
    let mut order: Vec<usize> = (0..h.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(h.dim(), h.dim(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Ground state through the spin-language Hamiltonian.
pub fn ground_state(ham: &Hamiltonian) -> Result<(SectorBasis, GroundState), OracleError> {
    let basis = enumerate_sector(ham)?;
    let h = build_hamiltonian(ham, &basis)?;
    let gs = lanczos(&h, 0x5eed)?;
    Ok((basis, gs))
}

/// `⟨ψ|H|ψ⟩ / ⟨ψ|ψ⟩` by full enumeration.
pub fn rayleigh_quotient<W: Wavefunction + ?Sized>(
    basis: &SectorBasis,
    h: &SparseOperator,
    psi: &W,
) -> Result<f64, OracleError> {
    let v = amplitude_vector(basis, psi)?;
    let norm: f64 = v.iter().map(|x| x * x).sum();
    Ok(h.expectation(&v) / norm)
}

/// `ψ(S)` over the basis, rescaled so the largest modulus is one.
pub fn amplitude_vector<W: Wavefunction + ?Sized>(basis: &SectorBasis, psi: &W) -> Result<Vec<f64>, OracleError> {
    let amps = psi.amplitudes(basis.states())?;
    let top = amps
        .iter()
        .filter(|a| !a.is_zero())
        .map(|a| a.log_abs)
        .fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(OracleError::AllZero);
    }
    let reference = Amplitude::new(top, 1);
    Ok(amps.iter().map(|a| a.ratio(&reference)).collect())
}

/// Exact SR inputs: local energies, log-derivatives and `|ψ|²` weights over
/// the whole sector.
pub fn exact_sr_inputs<W: Differentiable + ?Sized>(
    ham: &Hamiltonian,
    basis: &SectorBasis,
    psi: &W,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), OracleError> {
    let v = amplitude_vector(basis, psi)?;
    let norm: f64 = v.iter().map(|x| x * x).sum();
    let r = psi.n_params();
    let mut e = Vec::new();
    let mut o = Vec::new();
    let mut w = Vec::new();
    let mut row = vec![0.0; r];
    for (s, x) in basis.states().iter().zip(&v) {
        if *x == 0.0 {
            continue;
        }
        let amp = psi.log_derivative(s, &mut row)?;
        e.push(ham.local_energy_with(s, amp, psi)?);
        o.extend_from_slice(&row);
        w.push(x * x / norm);
    }
    Ok((e, o, w))
}

/// A wavefunction given by a table over a sector basis; zero elsewhere.
#[derive(Debug, Clone)]
pub struct TableWavefunction {
    basis: SectorBasis,
    values: Vec<f64>,
}

impl TableWavefunction {
    pub fn new(basis: SectorBasis, values: Vec<f64>) -> Self {
        assert_eq!(basis.len(), values.len());
        Self { basis, values }
    }
}

impl Wavefunction for TableWavefunction {
    fn amplitude(&self, s: &Configuration) -> Result<Amplitude, NetworkError> {
        Ok(match self.basis.index_of(s) {
            Some(i) => Amplitude::from_value(self.values[i]),
            None => Amplitude::ZERO,
        })
    }
}

/// Occupation-number basis: bit `i` is `c†_{i↑}`, bit `N + i` is `c†_{i↓}`.
#[derive(Debug, Clone)]
pub struct FockBasis {
    n_sites: usize,
    states: Vec<u64>,
}

impl FockBasis {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn index_of(&self, mask: u64) -> Option<usize> {
        self.states.binary_search(&mask).ok()
    }

    /// Particle numbers `(N↑, N↓)` of a basis state.
    pub fn particle_numbers(&self, mask: u64) -> (u32, u32) {
        let up_bits = (1u64 << self.n_sites) - 1;
        ((mask & up_bits).count_ones(), (mask >> self.n_sites).count_ones())
    }
}

/// Applies `c_mode` (`create == false`) or `c†_mode` with the anticommutation
/// sign `(−1)^(occupied modes below)`.
fn fermion_op(mask: u64, mode: usize, create: bool) -> Option<(u64, i32)> {
    let bit = 1u64 << mode;
    let occupied = mask & bit != 0;
    if occupied == create {
        return None;
    }
    let below = (mask & (bit - 1)).count_ones();
    let sign = if below.is_multiple_of(2) { 1 } else { -1 };
    Some((mask ^ bit, sign))
}

/// Applies an operator string, rightmost first.
fn apply_string(mask: u64, ops: &[(usize, bool)]) -> Option<(u64, i32)> {
    let mut state = mask;
    let mut sign = 1;
    for &(mode, create) in ops.iter().rev() {
        let (next, s) = fermion_op(state, mode, create)?;
        state = next;
        sign *= s;
    }
    Some((state, sign))
}

fn doubly_occupied(mask: u64, n: usize) -> bool {
    let up_bits = (1u64 << n) - 1;
    (mask & up_bits) & (mask >> n) != 0
}

/// `H_tJ = −t Σ P(c†_iσ c_jσ + h.c.)P + J Σ (S_i·S_j − n_i n_j / 4)` in the
/// projected Fock space with `(N↑, N↓)` taken from the spin-path sector.
pub fn fermionic_hamiltonian(ham: &Hamiltonian) -> Result<(FockBasis, SparseOperator), OracleError> {
    let spec = ham.spec();
    if spec.kind != ModelKind::TJ {
        return Err(OracleError::NotTJ);
    }
    let geom: &LatticeGeometry = ham.geometry();
    let n = geom.n_sites();
    if 2 * n > 64 {
        return Err(OracleError::TooManySites(n));
    }
    let sector = ham.sector();
    let dim = multinomial(n, &[sector.n_up, sector.n_down]);
    if dim > SECTOR_CAP as u128 {
        return Err(OracleError::CapExceeded { dim, cap: SECTOR_CAP });
    }
    let mut states: Vec<u64> = Vec::with_capacity(dim as usize);
    let up_bits = (1u64 << n) - 1;
    for up in 0u64..(1u64 << n) {
        if up.count_ones() as usize != sector.n_up {
            continue;
        }
        let free = up_bits & !up;
        // Subsets of the free sites with the right down count.
        let mut sub = free;
        loop {
            if sub.count_ones() as usize == sector.n_down {
                states.push(up | (sub << n));
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & free;
        }
    }
    states.sort_unstable();
    let basis = FockBasis { n_sites: n, states };

    let up = |i: usize| i;
    let dn = |i: usize| n + i;
    let mut rows = Vec::with_capacity(basis.len());
    for &mask in basis.states() {
        let mut row: Vec<(usize, f64)> = Vec::new();
        let mut diag = 0.0;
        let occ = |m: u64, mode: usize| (m >> mode) & 1;
        for &(i, j) in geom.nn_bonds() {
            for (a, b) in [(i, j), (j, i)] {
                for (ma, mb) in [(up(a), up(b)), (dn(a), dn(b))] {
                    if let Some((next, sign)) = apply_string(mask, &[(ma, true), (mb, false)]) {
                        if !doubly_occupied(next, n) {
                            let k = basis.index_of(next).expect("hopping conserves particle numbers");
                            row.push((k, -spec.t * f64::from(sign)));
                        }
                    }
                }
            }
            let (ui, di, uj, dj) = (occ(mask, up(i)), occ(mask, dn(i)), occ(mask, up(j)), occ(mask, dn(j)));
            let sz_i = 0.5 * (ui as f64 - di as f64);
            let sz_j = 0.5 * (uj as f64 - dj as f64);
            let n_i = (ui + di) as f64;
            let n_j = (uj + dj) as f64;
            diag += spec.j * (sz_i * sz_j - 0.25 * n_i * n_j);
            // ½(S⁺_i S⁻_j + S⁻_i S⁺_j) with S⁺ = c†_↑ c_↓.
            let flips: [[(usize, bool); 4]; 2] = [
                [(up(i), true), (dn(i), false), (dn(j), true), (up(j), false)],
                [(dn(i), true), (up(i), false), (up(j), true), (dn(j), false)],
            ];
            for ops in &flips {
                if let Some((next, sign)) = apply_string(mask, ops) {
                    let k = basis.index_of(next).expect("spin flip conserves particle numbers");
                    row.push((k, 0.5 * spec.j * f64::from(sign)));
                }
            }
        }
        let me = basis.index_of(mask).expect("own state");
        row.push((me, diag));
        rows.push(row);
    }
    Ok((basis, SparseOperator::from_rows(rows)))
}

/// Ground state of the fermionic path.
pub fn fermionic_ed(ham: &Hamiltonian) -> Result<(FockBasis, GroundState), OracleError> {
    let (basis, h) = fermionic_hamiltonian(ham)?;
    let gs = lanczos(&h, 0xfe55)?;
    Ok((basis, gs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::ModelSpec;

    fn spin(lx: usize, ly: usize, j2: f64) -> Hamiltonian {
        Hamiltonian::new(ModelSpec::j1j2(1.0, j2), LatticeGeometry::new(lx, ly).unwrap()).unwrap()
    }

    fn tj(lx: usize, ly: usize, j: f64) -> Hamiltonian {
        let geom = LatticeGeometry::new(lx, ly).unwrap();
        let n_h = 1.0 / geom.n_sites() as f64;
        Hamiltonian::new(ModelSpec::tj(1.0, j, n_h), geom).unwrap()
    }

    #[test]
    fn sector_sizes_and_order() {
        assert_eq!(enumerate_sector(&spin(4, 2, 0.5)).unwrap().len(), 70);
        assert_eq!(enumerate_sector(&spin(4, 4, 0.5)).unwrap().len(), 12870);
        let basis = enumerate_sector(&tj(4, 2, 0.4)).unwrap();
        assert_eq!(basis.len(), 280);
        assert!(basis.keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(basis.states()[0].values(), &[-1, -1, -1, 0, 1, 1, 1, 1]);
        for (i, s) in basis.states().iter().enumerate() {
            assert_eq!(basis.index_of(s), Some(i));
            assert_eq!((s.count(1), s.count(-1), s.count(0)), (4, 3, 1));
        }
    }

    #[test]
    fn cap_is_enforced() {
        let err = enumerate_sector(&spin(6, 6, 0.5)).unwrap_err();
        assert!(matches!(err, OracleError::CapExceeded { .. }));
    }

    #[test]
    fn ring_of_four() {
        let ham = spin(4, 1, 0.0);
        let (basis, gs) = ground_state(&ham).unwrap();
        assert_eq!(basis.len(), 6);
        assert!((gs.energy + 2.0).abs() < 1e-12);
        assert!(gs.residual < EIGEN_TOL);
    }

    #[test]
    fn lanczos_agrees_with_dense() {
        for ham in [spin(4, 2, 0.5), tj(4, 2, 0.4), spin(4, 2, 0.0)] {
            let basis = enumerate_sector(&ham).unwrap();
            let h = build_hamiltonian(&ham, &basis).unwrap();
            assert_eq!(h.asymmetry(), 0.0);
            let gs = lanczos(&h, 1).unwrap();
            let (vals, vecs) = dense_diagonalize(&h).unwrap();
            assert!((gs.energy - vals[0]).abs() < 1e-12);
            if vals[1] - vals[0] > 1e-6 {
                let overlap = gs.vector.dot(&vecs.column(0)).abs();
                assert!((overlap - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gauge_and_reproducibility() {
        let ham = spin(4, 2, 0.5);
        let (_, a) = ground_state(&ham).unwrap();
        let (_, b) = ground_state(&ham).unwrap();
        assert_eq!(a.energy, b.energy);
        assert_eq!(a.vector, b.vector);
        let first = a.vector.iter().find(|x| x.abs() > 1e-8).unwrap();
        assert!(*first > 0.0);
        assert!((a.vector.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fermionic_path_matches_spin_path() {
        for (lx, ly, j) in [(4, 2, 0.4), (4, 1, 0.0), (4, 1, 0.4)] {
            let ham = tj(lx, ly, j);
            let basis = enumerate_sector(&ham).unwrap();
            let h = build_hamiltonian(&ham, &basis).unwrap();
            let (fock, hf) = fermionic_hamiltonian(&ham).unwrap();
            assert_eq!(fock.len(), basis.len());
            assert!(hf.asymmetry() < 1e-14);
            for &m in fock.states() {
                assert_eq!(
                    fock.particle_numbers(m),
                    (ham.sector().n_up as u32, ham.sector().n_down as u32)
                );
            }
            let (a, _) = dense_diagonalize(&h).unwrap();
            let (b, _) = dense_diagonalize(&hf).unwrap();
            for k in 0..5.min(a.len()) {
                assert!((a[k] - b[k]).abs() < 1e-10, "{lx}x{ly} level {k}: {} vs {}", a[k], b[k]);
            }
        }
    }

    #[test]
    fn rayleigh_quotient_examples() {
        let ham = spin(4, 2, 0.0);
        let basis = enumerate_sector(&ham).unwrap();
        let h = build_hamiltonian(&ham, &basis).unwrap();
        let gs = lanczos(&h, 3).unwrap();
        let table = TableWavefunction::new(basis.clone(), gs.vector.as_slice().to_vec());
        let rq = rayleigh_quotient(&basis, &h, &table).unwrap();
        assert!((rq - gs.energy).abs() < 1e-12);

        let flat = TableWavefunction::new(basis.clone(), vec![1.0; basis.len()]);
        let rq = rayleigh_quotient(&basis, &h, &flat).unwrap();
        let dense = h.to_dense();
        let by_hand = dense.iter().sum::<f64>() / 70.0;
        assert!((rq - by_hand).abs() < 1e-12);

        let zero = TableWavefunction::new(basis.clone(), vec![0.0; basis.len()]);
        assert_eq!(rayleigh_quotient(&basis, &h, &zero), Err(OracleError::AllZero));
    }

    #[test]
    fn fermion_signs() {
        // c†_0 on |1⟩ (mode 1 occupied) has no modes below: sign +1.
        assert_eq!(fermion_op(0b10, 0, true), Some((0b11, 1)));
        // c†_2 on |011⟩ passes two occupied modes.
        assert_eq!(fermion_op(0b011, 2, true), Some((0b111, 1)));
        assert_eq!(fermion_op(0b001, 1, true), Some((0b011, -1)));
        assert_eq!(fermion_op(0b001, 0, true), None);
        assert_eq!(fermion_op(0b000, 0, false), None);
    }
}
