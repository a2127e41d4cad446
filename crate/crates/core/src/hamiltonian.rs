//! J1-J2 and t-J Hamiltonians: connected configurations and local energies.
//!
//! Spin operators are `s = σ/2`, so an aligned bond contributes `+J/4` to the
//! diagonal and an anti-aligned bond connects to the exchanged configuration
//! with amplitude `J/2`. Fermions are encoded with a single Jordan-Wigner
//! string running along a [`ModeOrdering`] of the sites.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{snake_ordering, Configuration, LatticeError, LatticeGeometry, ModeOrdering, Sector, SiteMode};
use crate::network::{Amplitude, NetworkError, Wavefunction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HamiltonianError {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(#[from] LatticeError),
    #[error("invalid hop {from} -> {to}: needs an electron on the source and a hole on the target")]
    InvalidHop { from: usize, to: usize },
    #[error("wavefunction amplitude vanishes on the reference configuration")]
    ZeroAmplitude,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("invalid model parameters: {0}")]
    InvalidModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "j1j2")]
    J1J2,
    #[serde(rename = "tj")]
    TJ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub j1: f64,
    pub j2: f64,
    pub t: f64,
    pub j: f64,
    pub n_h: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::J1J2,
            j1: 1.0,
            j2: 0.5,
            t: 1.0,
            j: 0.4,
            n_h: 0.125,
        }
    }
}

impl ModelSpec {
    pub fn j1j2(j1: f64, j2: f64) -> Self {
        Self {
            kind: ModelKind::J1J2,
            j1,
            j2,
            ..Self::default()
        }
    }

    pub fn tj(t: f64, j: f64, n_h: f64) -> Self {
        Self {
            kind: ModelKind::TJ,
            t,
            j,
            n_h,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), HamiltonianError> {
        match self.kind {
            ModelKind::J1J2 if !(self.j1 > 0.0) => Err(HamiltonianError::InvalidModel(format!(
                "j1 must be positive, got {}",
                self.j1
            ))),
            ModelKind::TJ if self.t == 0.0 || !self.t.is_finite() => {
                Err(HamiltonianError::InvalidModel("t must be nonzero".into()))
            }
            ModelKind::TJ if !(0.0..1.0).contains(&self.n_h) => Err(HamiltonianError::InvalidModel(format!(
                "n_h must lie in [0, 1), got {}",
                self.n_h
            ))),
            _ => Ok(()),
        }
    }

    pub fn mode(&self) -> SiteMode {
        match self.kind {
            ModelKind::J1J2 => SiteMode::Spin,
            ModelKind::TJ => SiteMode::TJ,
        }
    }
}

/// Nonzero matrix elements `<S'|H|S>` of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectedSet {
    pub diagonal: f64,
    pub offdiag: Vec<(Configuration, f64)>,
}

/// A model bound to a lattice, its conserved sector and fermion ordering.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    spec: ModelSpec,
    geom: LatticeGeometry,
    ordering: ModeOrdering,
    sector: Sector,
}

impl Hamiltonian {
    /// Uses the snake ordering for the Jordan-Wigner string.
    pub fn new(spec: ModelSpec, geom: LatticeGeometry) -> Result<Self, HamiltonianError> {
        let ordering = snake_ordering(&geom);
        Self::with_ordering(spec, geom, ordering)
    }

    pub fn with_ordering(
        spec: ModelSpec,
        geom: LatticeGeometry,
        ordering: ModeOrdering,
    ) -> Result<Self, HamiltonianError> {
        spec.validate()?;
        let sector = match spec.kind {
            ModelKind::J1J2 => Sector::spin(&geom)?,
            ModelKind::TJ => Sector::tj(&geom, spec.n_h)?,
        };
        if ordering.order().len() != geom.n_sites() {
            return Err(HamiltonianError::InvalidModel(
                "mode ordering does not cover the lattice".into(),
            ));
        }
        Ok(Self {
            spec,
            geom,
            ordering,
            sector,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geom
    }

    pub fn ordering(&self) -> &ModeOrdering {
        &self.ordering
    }

    pub fn sector(&self) -> &Sector {
        &self.sector
    }

    pub fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    /// All configurations connected to `s`, with duplicates merged.
    pub fn connected(&self, s: &Configuration) -> Result<ConnectedSet, HamiltonianError> {
        self.sector.check(s)?;
        let mut entries: Vec<((usize, usize), f64)> = Vec::with_capacity(2 * self.n_sites());
        let mut diagonal = 0.0;
        let v = s.values();
        match self.spec.kind {
            ModelKind::J1J2 => {
                for (bonds, coupling) in [
                    (self.geom.nn_bonds(), self.spec.j1),
                    (self.geom.nnn_bonds(), self.spec.j2),
                ] {
                    if coupling == 0.0 {
                        continue;
                    }
                    for &(i, j) in bonds {
                        if v[i] == v[j] {
                            diagonal += 0.25 * coupling;
                        } else {
                            diagonal -= 0.25 * coupling;
                            entries.push(((i, j), 0.5 * coupling));
                        }
                    }
                }
            }
            ModelKind::TJ => {
                let (t, jx) = (self.spec.t, self.spec.j);
                for &(i, j) in self.geom.nn_bonds() {
                    match (v[i], v[j]) {
                        (0, 0) => {}
                        (0, _) => {
                            let sign = self.jw_hopping_sign(s, j, i)?;
                            entries.push(((i, j), -t * f64::from(sign)));
                        }
                        (_, 0) => {
                            let sign = self.jw_hopping_sign(s, i, j)?;
                            entries.push(((i, j), -t * f64::from(sign)));
                        }
                        (a, b) if a == b => {
                            // s_i.s_j - n_i n_j / 4 vanishes on aligned pairs.
                        }
                        _ => {
                            if jx != 0.0 {
                                diagonal -= 0.5 * jx;
                                entries.push(((i, j), 0.5 * jx));
                            }
                        }
                    }
                }
            }
        }
        entries.sort_by_key(|a| a.0);
        let mut offdiag: Vec<(Configuration, f64)> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (pair, amp) in entries {
            if last == Some(pair) {
                offdiag.last_mut().expect("merged entry").1 += amp;
            } else {
                offdiag.push((s.swapped(pair.0, pair.1), amp));
                last = Some(pair);
            }
        }
        offdiag.retain(|(_, a)| *a != 0.0);
        Ok(ConnectedSet { diagonal, offdiag })
    }

    /// Fermionic sign of moving the electron on `from` to the hole on `to`:
    /// `(-1)^(occupied sites strictly between them along the ordering)`.
    pub fn jw_hopping_sign(&self, s: &Configuration, from: usize, to: usize) -> Result<i8, HamiltonianError> {
        jw_hopping_sign(&self.ordering, s, from, to)
    }

    /// `E_loc(S) = Σ_S' <S'|H|S> W(S')/W(S)` with the connected set evaluated
    /// in one batched call.
    pub fn local_energy<W: Wavefunction + ?Sized>(&self, s: &Configuration, psi: &W) -> Result<f64, HamiltonianError> {
        let reference = psi.amplitude(s)?;
        self.local_energy_with(s, reference, psi)
    }

    /// Same as [`Hamiltonian::local_energy`] with a cached reference amplitude.
    pub fn local_energy_with<W: Wavefunction + ?Sized>(
        &self,
        s: &Configuration,
        reference: Amplitude,
        psi: &W,
    ) -> Result<f64, HamiltonianError> {
        if reference.is_zero() {
            return Err(HamiltonianError::ZeroAmplitude);
        }
        let set = self.connected(s)?;
        let configs: Vec<Configuration> = set.offdiag.iter().map(|(c, _)| c.clone()).collect();
        let amps = psi.amplitudes(&configs)?;
        let mut e = set.diagonal;
        for ((_, h), a) in set.offdiag.iter().zip(&amps) {
            e += h * a.ratio(&reference);
        }
        Ok(e)
    }
}

/// Free-function form of [`Hamiltonian::jw_hopping_sign`].
pub fn jw_hopping_sign(
    ordering: &ModeOrdering,
    s: &Configuration,
    from: usize,
    to: usize,
) -> Result<i8, HamiltonianError> {
    let n = s.len();
    if from == to || from >= n || to >= n || s.get(from) == 0 || s.get(to) != 0 {
        return Err(HamiltonianError::InvalidHop { from, to });
    }
    let (a, b) = {
        let pa = ordering.position(from);
        let pb = ordering.position(to);
        (pa.min(pb), pa.max(pb))
    };
    let between = ordering.order()[a + 1..b]
        .iter()
        .filter(|&&site| s.get(site) != 0)
        .count();
    Ok(if between % 2 == 0 { 1 } else { -1 })
}
