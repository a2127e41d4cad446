//! Periodic square-lattice geometry, basis configurations and conserved sectors.
//!
//! Sites are indexed row-major: `site = y * lx + x`. Bonds are stored once as
//! `(i, j)` with `i < j`; on tori with an extent of 2 the two wrap directions
//! collapse onto the same pair and are kept a single time.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("degenerate periodic wrap for a {lx}x{ly} lattice")]
    DegenerateWrap { lx: usize, ly: usize },
    #[error("lattice {lx}x{ly} is too small")]
    TooSmall { lx: usize, ly: usize },
    #[error("production lattices must be square with even L >= 4, got {lx}x{ly}")]
    NotProductionShape { lx: usize, ly: usize },
    #[error("spin sector S^z = 0 needs an even number of sites, got {0}")]
    OddSites(usize),
    #[error("hole doping {0} is outside [0, 1)")]
    BadDoping(f64),
    #[error("configuration has {got} sites, lattice has {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("configuration violates the {0} sector")]
    SectorViolation(&'static str),
    #[error("operation unsupported for {0:?} configurations")]
    UnsupportedMode(SiteMode),
    #[error("invalid site value {0}")]
    BadValue(i8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeGeometry {
    lx: usize,
    ly: usize,
    nn_bonds: Vec<(usize, usize)>,
    nnn_bonds: Vec<(usize, usize)>,
    nn_table: Vec<Vec<usize>>,
}

impl LatticeGeometry {
    /// Builds a periodic `lx` x `ly` torus.
    ///
    /// Rectangular and single-row shapes are accepted so small sectors can be
    /// checked exactly; use [`LatticeGeometry::square`] for production runs.
    pub fn new(lx: usize, ly: usize) -> Result<Self, LatticeError> {
        if lx == 0 || ly == 0 || lx * ly < 4 {
            return Err(LatticeError::TooSmall { lx, ly });
        }
        if lx <= 2 && ly <= 2 {
            return Err(LatticeError::DegenerateWrap { lx, ly });
        }
        if (lx == 1 && ly < 4) || (ly == 1 && lx < 4) {
            return Err(LatticeError::TooSmall { lx, ly });
        }
        let n = lx * ly;
        let site = |x: isize, y: isize| -> usize {
            let xm = x.rem_euclid(lx as isize) as usize;
            let ym = y.rem_euclid(ly as isize) as usize;
            ym * lx + xm
        };
        let collect = |dirs: &[(isize, isize)]| -> Vec<(usize, usize)> {
            let mut bonds = Vec::new();
            for y in 0..ly as isize {
                for x in 0..lx as isize {
                    let i = site(x, y);
                    for &(dx, dy) in dirs {
                        let j = site(x + dx, y + dy);
                        if i != j {
                            bonds.push((i.min(j), i.max(j)));
                        }
                    }
                }
            }
            bonds.sort_unstable();
            bonds.dedup();
            bonds
        };
        let nn_bonds = collect(&[(1, 0), (0, 1)]);
        // On a single row or column the diagonals fold onto nearest neighbours.
        let nnn_bonds = if lx == 1 || ly == 1 {
            Vec::new()
        } else {
            collect(&[(1, 1), (1, -1)])
        };
        let mut nn_table = vec![Vec::new(); n];
        for &(i, j) in &nn_bonds {
            nn_table[i].push(j);
            nn_table[j].push(i);
        }
        for row in &mut nn_table {
            row.sort_unstable();
        }
        Ok(Self {
            lx,
            ly,
            nn_bonds,
            nnn_bonds,
            nn_table,
        })
    }

    /// Square `l` x `l` torus with even `l >= 4`.
    pub fn square(l: usize) -> Result<Self, LatticeError> {
        if l < 4 || !l.is_multiple_of(2) {
            return Err(LatticeError::NotProductionShape { lx: l, ly: l });
        }
        Self::new(l, l)
    }

    pub fn lx(&self) -> usize {
        self.lx
    }

    pub fn ly(&self) -> usize {
        self.ly
    }

    pub fn n_sites(&self) -> usize {
        self.lx * self.ly
    }

    pub fn nn_bonds(&self) -> &[(usize, usize)] {
        &self.nn_bonds
    }

    pub fn nnn_bonds(&self) -> &[(usize, usize)] {
        &self.nnn_bonds
    }

    /// Sorted nearest neighbours of `site`.
    pub fn neighbors(&self, site: usize) -> &[usize] {
        &self.nn_table[site]
    }

    pub fn site(&self, x: usize, y: usize) -> usize {
        (y % self.ly) * self.lx + (x % self.lx)
    }

    pub fn coords(&self, site: usize) -> (usize, usize) {
        (site % self.lx, site / self.lx)
    }

    /// Checkerboard sublattice A: `x + y` even.
    pub fn on_sublattice_a(&self, site: usize) -> bool {
        let (x, y) = self.coords(site);
        (x + y) % 2 == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SiteMode {
    /// Values `±1` meaning `s^z = ±1/2`.
    Spin,
    /// Values `+1` up electron, `-1` down electron, `0` hole.
    TJ,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Configuration {
    values: Vec<i8>,
    mode: SiteMode,
}

impl Configuration {
    pub fn new(values: Vec<i8>, mode: SiteMode) -> Result<Self, LatticeError> {
        for &v in &values {
            let ok = match mode {
                SiteMode::Spin => v == 1 || v == -1,
                SiteMode::TJ => (-1..=1).contains(&v),
            };
            if !ok {
                return Err(LatticeError::BadValue(v));
            }
        }
        Ok(Self { values, mode })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn mode(&self) -> SiteMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, site: usize) -> i8 {
        self.values[site]
    }

    /// Exchanges the values on two sites.
    pub fn swap(&mut self, i: usize, j: usize) {
        self.values.swap(i, j);
    }

    pub fn swapped(&self, i: usize, j: usize) -> Self {
        let mut out = self.clone();
        out.swap(i, j);
        out
    }

    pub fn count(&self, value: i8) -> usize {
        self.values.iter().filter(|&&v| v == value).count()
    }

    /// Néel pattern with up spins on sublattice A.
    pub fn neel(geom: &LatticeGeometry) -> Self {
        let values = (0..geom.n_sites())
            .map(|s| if geom.on_sublattice_a(s) { 1 } else { -1 })
            .collect();
        Self {
            values,
            mode: SiteMode::Spin,
        }
    }

    pub fn all_up(geom: &LatticeGeometry) -> Self {
        Self {
            values: vec![1; geom.n_sites()],
            mode: SiteMode::Spin,
        }
    }
}

/// Conserved particle content shared by every configuration of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sector {
    pub mode: SiteMode,
    pub n_sites: usize,
    pub n_up: usize,
    pub n_down: usize,
    pub n_holes: usize,
}

impl Sector {
    /// The `S^z = 0` spin sector.
    pub fn spin(geom: &LatticeGeometry) -> Result<Self, LatticeError> {
        let n = geom.n_sites();
        if !n.is_multiple_of(2) {
            return Err(LatticeError::OddSites(n));
        }
        Ok(Self {
            mode: SiteMode::Spin,
            n_sites: n,
            n_up: n / 2,
            n_down: n / 2,
            n_holes: 0,
        })
    }

    /// t-J sector with `round(n_h * N)` holes and minimal `|S^z|`
    /// (one extra up electron when the electron count is odd).
    pub fn tj(geom: &LatticeGeometry, hole_doping: f64) -> Result<Self, LatticeError> {
        if !(0.0..1.0).contains(&hole_doping) {
            return Err(LatticeError::BadDoping(hole_doping));
        }
        let n = geom.n_sites();
        let n_holes = (hole_doping * n as f64).round() as usize;
        let electrons = n - n_holes;
        Ok(Self {
            mode: SiteMode::TJ,
            n_sites: n,
            n_up: electrons.div_ceil(2),
            n_down: electrons / 2,
            n_holes,
        })
    }

    /// Checks that `config` belongs to this sector.
    pub fn check(&self, config: &Configuration) -> Result<(), LatticeError> {
        if config.len() != self.n_sites {
            return Err(LatticeError::SizeMismatch {
                expected: self.n_sites,
                got: config.len(),
            });
        }
        if config.mode() != self.mode {
            return Err(LatticeError::UnsupportedMode(config.mode()));
        }
        let (label, ok) = match self.mode {
            SiteMode::Spin => ("S^z = 0", config.count(1) == self.n_up),
            SiteMode::TJ => (
                "t-J particle-number",
                config.count(0) == self.n_holes && config.count(1) == self.n_up && config.count(-1) == self.n_down,
            ),
        };
        if ok {
            Ok(())
        } else {
            Err(LatticeError::SectorViolation(label))
        }
    }

    /// Uniformly random permutation of the sector's value multiset.
    pub fn random_config<R: Rng + ?Sized>(&self, rng: &mut R) -> Configuration {
        let mut values = Vec::with_capacity(self.n_sites);
        values.extend(std::iter::repeat_n(1i8, self.n_up));
        values.extend(std::iter::repeat_n(-1i8, self.n_down));
        values.extend(std::iter::repeat_n(0i8, self.n_holes));
        values.shuffle(rng);
        Configuration {
            values,
            mode: self.mode,
        }
    }
}

/// `(-1)^(number of up spins on sublattice A)`.
pub fn marshall_sign(geom: &LatticeGeometry, config: &Configuration) -> Result<i8, LatticeError> {
    if config.mode() != SiteMode::Spin {
        return Err(LatticeError::UnsupportedMode(config.mode()));
    }
    if config.len() != geom.n_sites() {
        return Err(LatticeError::SizeMismatch {
            expected: geom.n_sites(),
            got: config.len(),
        });
    }
    let ups = config
        .values()
        .iter()
        .enumerate()
        .filter(|&(s, &v)| v == 1 && geom.on_sublattice_a(s))
        .count();
    Ok(if ups % 2 == 0 { 1 } else { -1 })
}

/// One-dimensional chain through the sites used to order fermionic modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeOrdering {
    order: Vec<usize>,
    position: Vec<usize>,
}

impl ModeOrdering {
    pub fn from_order(order: Vec<usize>) -> Option<Self> {
        let n = order.len();
        let mut position = vec![usize::MAX; n];
        for (p, &s) in order.iter().enumerate() {
            if s >= n || position[s] != usize::MAX {
                return None;
            }
            position[s] = p;
        }
        Some(Self { order, position })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Position of `site` along the chain.
    pub fn position(&self, site: usize) -> usize {
        self.position[site]
    }
}

/// Boustrophedon order: even rows left to right, odd rows right to left.
pub fn snake_ordering(geom: &LatticeGeometry) -> ModeOrdering {
    let mut order = Vec::with_capacity(geom.n_sites());
    for y in 0..geom.ly() {
        if y % 2 == 0 {
            order.extend((0..geom.lx()).map(|x| geom.site(x, y)));
        } else {
            order.extend((0..geom.lx()).rev().map(|x| geom.site(x, y)));
        }
    }
    ModeOrdering::from_order(order).expect("snake order is a permutation")
}

/// Cyclic shift on the torus: the value at `(x, y)` moves to `(x + dx, y + dy)`.
pub fn translate(geom: &LatticeGeometry, config: &Configuration, dx: isize, dy: isize) -> Configuration {
    let (lx, ly) = (geom.lx() as isize, geom.ly() as isize);
    let mut values = vec![0i8; config.len()];
    for (s, &v) in config.values().iter().enumerate() {
        let (x, y) = geom.coords(s);
        let nx = (x as isize + dx).rem_euclid(lx) as usize;
        let ny = (y as isize + dy).rem_euclid(ly) as usize;
        values[geom.site(nx, ny)] = v;
    }
    Configuration {
        values,
        mode: config.mode(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_by_four_bond_counts() {
        let g = LatticeGeometry::new(4, 4).unwrap();
        assert_eq!(g.nn_bonds().len(), 32);
        assert_eq!(g.nnn_bonds().len(), 32);
        for s in 0..16 {
            let nn = g.nn_bonds().iter().filter(|b| b.0 == s || b.1 == s).count();
            let nnn = g.nnn_bonds().iter().filter(|b| b.0 == s || b.1 == s).count();
            assert_eq!((nn, nnn), (4, 4));
        }
        for &(i, j) in g.nn_bonds().iter().chain(g.nnn_bonds()) {
            assert!(i < j);
        }
    }

    #[test]
    fn two_by_two_is_rejected() {
        let err = LatticeGeometry::new(2, 2).unwrap_err();
        assert_eq!(err, LatticeError::DegenerateWrap { lx: 2, ly: 2 });
        assert!(err.to_string().contains("degenerate periodic wrap"));
    }

    #[test]
    fn six_by_six_neighbours_of_origin() {
        let g = LatticeGeometry::new(6, 6).unwrap();
        assert_eq!(g.nn_bonds().len(), 72);
        assert_eq!(g.neighbors(0), &[1, 5, 6, 30]);
    }

    #[test]
    fn square_rejects_odd_and_small() {
        assert!(LatticeGeometry::square(5).is_err());
        assert!(LatticeGeometry::square(2).is_err());
        assert!(LatticeGeometry::square(6).is_ok());
        let g = LatticeGeometry::new(3, 3).unwrap();
        assert_eq!(Sector::spin(&g).unwrap_err(), LatticeError::OddSites(9));
    }

    #[test]
    fn two_row_torus_collapses_vertical_wrap() {
        let g = LatticeGeometry::new(4, 2).unwrap();
        assert_eq!(g.nn_bonds().len(), 12);
        assert_eq!(g.nnn_bonds().len(), 8);
        assert_eq!(g.neighbors(0), &[1, 3, 4]);
    }

    #[test]
    fn ring_has_no_diagonals() {
        let g = LatticeGeometry::new(4, 1).unwrap();
        assert_eq!(g.nn_bonds(), &[(0, 1), (0, 3), (1, 2), (2, 3)]);
        assert!(g.nnn_bonds().is_empty());
    }

    #[test]
    fn marshall_examples() {
        let g4 = LatticeGeometry::new(4, 4).unwrap();
        assert_eq!(marshall_sign(&g4, &Configuration::all_up(&g4)).unwrap(), 1);
        let neel = Configuration::neel(&g4);
        assert_eq!(marshall_sign(&g4, &neel).unwrap(), 1);
        let mut flipped = neel.values().to_vec();
        flipped[0] = -1;
        let flipped = Configuration::new(flipped, SiteMode::Spin).unwrap();
        assert_eq!(marshall_sign(&g4, &flipped).unwrap(), -1);
        let g6 = LatticeGeometry::new(6, 6).unwrap();
        assert_eq!(marshall_sign(&g6, &Configuration::all_up(&g6)).unwrap(), 1);

        let tj = Configuration::new(vec![0; 16], SiteMode::TJ).unwrap();
        assert_eq!(
            marshall_sign(&g4, &tj).unwrap_err(),
            LatticeError::UnsupportedMode(SiteMode::TJ)
        );
    }

    #[test]
    fn snake_examples() {
        let g = LatticeGeometry::new(4, 2).unwrap();
        assert_eq!(snake_ordering(&g).order(), &[0, 1, 2, 3, 7, 6, 5, 4]);
        let ring = LatticeGeometry::new(4, 1).unwrap();
        assert_eq!(snake_ordering(&ring).order(), &[0, 1, 2, 3]);
        let g = LatticeGeometry::new(4, 4).unwrap();
        let order = snake_ordering(&g);
        for w in order.order().windows(2) {
            assert!(g.neighbors(w[0]).contains(&w[1]));
        }
        assert_eq!(order.position(7), 4);
    }

    #[test]
    fn tj_sector_counts() {
        let g = LatticeGeometry::new(4, 2).unwrap();
        let s = Sector::tj(&g, 0.125).unwrap();
        assert_eq!((s.n_holes, s.n_up, s.n_down), (1, 4, 3));
        let g8 = LatticeGeometry::new(8, 8).unwrap();
        let s = Sector::tj(&g8, 0.125).unwrap();
        assert_eq!((s.n_holes, s.n_up, s.n_down), (8, 28, 28));
        assert!(Sector::tj(&g8, 1.0).is_err());
    }

    #[test]
    fn neel_has_period_two() {
        let g = LatticeGeometry::new(6, 4).unwrap();
        let neel = Configuration::neel(&g);
        assert_eq!(translate(&g, &neel, 2, 0), neel);
        assert_eq!(translate(&g, &neel, 0, 2), neel);
        assert_ne!(translate(&g, &neel, 1, 0), neel);
    }

    fn arb_config(lx: usize, ly: usize, tj: bool) -> impl Strategy<Value = (LatticeGeometry, Configuration)> {
        any::<u64>().prop_map(move |seed| {
            let g = LatticeGeometry::new(lx, ly).unwrap();
            let sector = if tj {
                Sector::tj(&g, 0.125).unwrap()
            } else {
                Sector::spin(&g).unwrap()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sector.random_config(&mut rng);
            (g, c)
        })
    }

    proptest! {
        #[test]
        fn translation_group_and_sector((g, c) in arb_config(6, 4, true), dx in -7isize..7, dy in -7isize..7) {
            let sector = Sector::tj(&g, 0.125).unwrap();
            let t = translate(&g, &c, dx, dy);
            prop_assert!(sector.check(&t).is_ok());
            prop_assert_eq!(translate(&g, &t, -dx, -dy), c.clone());
            prop_assert_eq!(translate(&g, &c, 0, 0), c.clone());
            prop_assert_eq!(translate(&g, &translate(&g, &c, 1, 0), g.lx() as isize - 1, 0), c);
        }

        #[test]
        fn marshall_invariant_under_even_shift((g, c) in arb_config(6, 6, false), dx in -3isize..3, dy in -3isize..3) {
            let t = translate(&g, &c, 2 * dx, 2 * dy);
            prop_assert_eq!(marshall_sign(&g, &t).unwrap(), marshall_sign(&g, &c).unwrap());
        }
    }
}
