//! Finite atomic measures on R^n.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_from_slice, AltCube, Cube, Grid, Point, MAX_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: Vec<f64>,
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AtomicMeasure {
    pub n: usize,
    pub points: Vec<Point>,
    pub masses: Vec<f64>,
}

impl AtomicMeasure {
    pub fn new(n: usize, points: Vec<Point>, masses: Vec<f64>) -> Result<Self> {
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidMeasure(format!("dimension {n} unsupported")));
        }
        if points.len() != masses.len() {
            return Err(Error::InvalidMeasure("points and masses differ in length".into()));
        }
        for (p, m) in points.iter().zip(&masses) {
            if !(*m > 0.0) || !m.is_finite() {
                return Err(Error::InvalidMeasure(format!("mass {m} is not positive and finite")));
            }
            if p[..n].iter().any(|v| !v.is_finite()) || p[n..].iter().any(|v| *v != 0.0) {
                return Err(Error::InvalidMeasure(format!("bad point {:?}", &p[..n])));
            }
        }
        let mut sorted: Vec<&Point> = points.iter().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidMeasure("repeated point".into()));
        }
        Ok(AtomicMeasure { n, points, masses })
    }

    pub fn empty(n: usize) -> Self {
        AtomicMeasure { n, points: vec![], masses: vec![] }
    }

    pub fn from_atoms(n: usize, atoms: &[Atom]) -> Result<Self> {
        for a in atoms {
            if a.point.len() != n {
                return Err(Error::InvalidMeasure(format!("point {:?} is not {n}-dimensional", a.point)));
            }
        }
        Self::new(
            n,
            atoms.iter().map(|a| point_from_slice(&a.point)).collect(),
            atoms.iter().map(|a| a.mass).collect(),
        )
    }

    pub fn atoms(&self) -> Vec<Atom> {
        self.points
            .iter()
            .zip(&self.masses)
            .map(|(p, m)| Atom { point: p[..self.n].to_vec(), mass: *m })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        AtomicMeasure { n: self.n, points: self.points.clone(), masses: self.masses.iter().map(|m| m * c).collect() }
    }

    pub fn dilated(&self, c: f64) -> Self {
        let points = self.points.iter().map(|p| p.map(|v| v * c)).collect();
        AtomicMeasure { n: self.n, points, masses: self.masses.clone() }
    }

    pub fn restrict(&self, keep: impl Fn(&Point) -> bool) -> Self {
        let mut out = AtomicMeasure::empty(self.n);
        for (p, m) in self.points.iter().zip(&self.masses) {
            if keep(p) {
                out.points.push(*p);
                out.masses.push(*m);
            }
        }
        out
    }

    pub fn mass_at(&self, p: &Point) -> f64 {
        self.points.iter().zip(&self.masses).filter(|(q, _)| *q == p).map(|(_, m)| *m).sum()
    }

    pub fn cube_mass(&self, grid: &Grid, q: &Cube) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .filter(|(p, _)| q.contains_u(&grid.coords(p), grid.n))
            .map(|(_, m)| *m)
            .sum()
    }

    pub fn alt_mass(&self, grid: &Grid, k: &AltCube) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .filter(|(p, _)| k.contains_u(&grid.coords(p), grid.n))
            .map(|(_, m)| *m)
            .sum()
    }

    /// `μ(Q, 𝔓)`: the cube mass less the largest single mass at a common point in `Q`.
    pub fn punctured_mass(&self, grid: &Grid, q: &Cube, common: &CommonPoints) -> f64 {
        let total = self.cube_mass(grid, q);
        let biggest = common
            .points
            .iter()
            .filter(|p| q.contains_u(&grid.coords(p), grid.n))
            .map(|p| self.mass_at(p))
            .fold(0.0, f64::max);
        total - biggest
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommonPoints {
    pub points: Vec<Point>,
    /// `(σ index, ω index)` for each point.
    pub pairs: Vec<(usize, usize)>,
}

impl CommonPoints {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Points carried by both measures, under exact coordinate equality.
pub fn common_points(sigma: &AtomicMeasure, omega: &AtomicMeasure) -> CommonPoints {
    let mut out = CommonPoints::default();
    for (i, p) in sigma.points.iter().enumerate() {
        if let Some(j) = omega.points.iter().position(|q| q == p) {
            out.points.push(*p);
            out.pairs.push((i, j));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct Split {
    pub sigma: AtomicMeasure,
    pub omega: AtomicMeasure,
    /// Common points of `Q` in selection order.
    pub order: Vec<Point>,
}

/// Alternating selection over the common points in `Q`: odd picks maximise
/// the remaining σ-mass and lose their ω-mass, even picks maximise the
/// remaining ω-mass and lose their σ-mass.
pub fn greedy_split(sigma: &AtomicMeasure, omega: &AtomicMeasure, grid: &Grid, q: &Cube) -> Split {
    let inq = |p: &Point| q.contains_u(&grid.coords(p), grid.n);
    let s = sigma.restrict(inq);
    let w = omega.restrict(inq);
    let mut rest: Vec<(Point, f64, f64)> =
        common_points(&s, &w).pairs.iter().map(|&(i, j)| (s.points[i], s.masses[i], w.masses[j])).collect();
    let mut order = Vec::with_capacity(rest.len());
    let mut drop_sigma = Vec::new();
    let mut drop_omega = Vec::new();
    let mut odd = true;
    while !rest.is_empty() {
        let key = |e: &(Point, f64, f64)| if odd { e.1 } else { e.2 };
        let mut best = 0;
        for (k, e) in rest.iter().enumerate() {
            if key(e) > key(&rest[best]) {
                best = k;
            }
        }
        let (p, _, _) = rest.remove(best);
        order.push(p);
        if odd {
            drop_omega.push(p);
        } else {
            drop_sigma.push(p);
        }
        odd = !odd;
    }
    Split {
        sigma: s.restrict(|p| !drop_sigma.contains(p)),
        omega: w.restrict(|p| !drop_omega.contains(p)),
        order,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MassLaw {
    Unit,
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
}

impl MassLaw {
    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            MassLaw::Unit => 1.0,
            MassLaw::Uniform { lo, hi } => rng.gen_range(lo..hi),
            MassLaw::LogUniform { lo, hi } => rng.gen_range(lo.ln()..hi.ln()).exp(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    UniformBox { count: usize, mass_law: MassLaw, scale: f64 },
    LineSupported { count: usize, mass_law: MassLaw, scale: f64 },
    PairWithCommon { count: usize, common_fraction: f64, mass_law: MassLaw, scale: f64 },
}

fn sample_points(rng: &mut ChaCha8Rng, n: usize, count: usize, scale: f64, line: bool) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::with_capacity(count);
    while pts.len() < count {
        let mut p = [0.0; MAX_DIM];
        let t = rng.gen::<f64>() * scale;
        for (d, v) in p.iter_mut().enumerate().take(n) {
            *v = if line { t * (d + 1) as f64 / n as f64 } else { rng.gen::<f64>() * scale };
        }
        if !pts.contains(&p) {
            pts.push(p);
        }
    }
    pts
}

fn build(n: usize, pts: Vec<Point>, law: &MassLaw, rng: &mut ChaCha8Rng) -> AtomicMeasure {
    let masses = pts.iter().map(|_| law.sample(rng)).collect();
    AtomicMeasure { n, points: pts, masses }
}

/// Deterministic pair `(σ, ω)` from a seed. Single-measure generators fill
/// both slots with independent draws.
pub fn generate(seed: u64, n: usize, g: &Generator) -> (AtomicMeasure, AtomicMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match g {
        Generator::UniformBox { count, mass_law, scale } | Generator::LineSupported { count, mass_law, scale } => {
            let line = matches!(g, Generator::LineSupported { .. });
            let a = sample_points(&mut rng, n, *count, *scale, line);
            let s = build(n, a, mass_law, &mut rng);
            let b = sample_points(&mut rng, n, *count, *scale, line);
            let w = build(n, b, mass_law, &mut rng);
            (s, w)
        }
        Generator::PairWithCommon { count, common_fraction, mass_law, scale } => {
            let all = sample_points(&mut rng, n, 2 * count, *scale, false);
            let shared = ((*count as f64) * common_fraction.clamp(0.0, 1.0)).round() as usize;
            let sp = all[..*count].to_vec();
            let mut wp = all[..shared].to_vec();
            wp.extend_from_slice(&all[*count..2 * count - shared]);
            let s = build(n, sp, mass_law, &mut rng);
            let w = build(n, wp, mass_law, &mut rng);
            (s, w)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::QuasiMap;
    use proptest::prelude::*;

    fn g1() -> Grid {
        Grid { n: 1, shift: [0.0; 3], top: -2, bottom: 10, lo: [-4, 0, 0], hi: [4, 0, 0], map: QuasiMap::Identity }
    }

    fn m1(pts: &[f64], ms: &[f64]) -> AtomicMeasure {
        AtomicMeasure::new(1, pts.iter().map(|&x| [x, 0.0, 0.0]).collect(), ms.to_vec()).unwrap()
    }

    #[test]
    fn cube_mass_examples() {
        let g = g1();
        let mu = m1(&[0.25, 0.75], &[1.0, 3.0]);
        assert_eq!(mu.cube_mass(&g, &Cube::new(0, [0; 3])), 4.0);
        assert_eq!(mu.cube_mass(&g, &Cube::new(1, [0; 3])), 1.0);
        let b = m1(&[0.5], &[1.0]);
        assert_eq!(b.cube_mass(&g, &Cube::new(1, [1, 0, 0])), 1.0);
        assert_eq!(b.cube_mass(&g, &Cube::new(1, [0, 0, 0])), 0.0);
    }

    #[test]
    fn punctured_examples() {
        let g = g1();
        let w = m1(&[0.0, 1.0], &[1.0, 2.0]);
        let s = m1(&[0.0, 1.0], &[5.0, 5.0]);
        let cp = common_points(&s, &w);
        let q = Cube::new(-1, [0; 3]);
        assert_eq!(w.punctured_mass(&g, &q, &cp), 1.0);
        assert_eq!(w.punctured_mass(&g, &q, &CommonPoints::default()), 3.0);
        // ties: brute-force maximum over P ∩ Q removes one copy
        let w2 = m1(&[0.0, 1.0, 1.5], &[2.0, 2.0, 1.0]);
        let s2 = m1(&[0.0, 1.0], &[1.0, 1.0]);
        let cp2 = common_points(&s2, &w2);
        let brute = cp2.points.iter().map(|p| w2.mass_at(p)).fold(0.0, f64::max);
        assert_eq!(w2.punctured_mass(&g, &q, &cp2), 5.0 - brute);
    }

    #[test]
    fn common_point_conventions() {
        let a = m1(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(common_points(&a, &m1(&[2.0], &[1.0])).is_empty());
        assert_eq!(common_points(&a, &m1(&[1.0], &[1.0])).points.len(), 1);
        assert!(common_points(&a, &m1(&[1e-15], &[1.0])).is_empty());
    }

    #[test]
    fn greedy_split_example() {
        let g = g1();
        let p = [0.1, 0.2, 0.3, 0.4];
        let s = m1(&p, &[4.0, 3.0, 2.0, 1.0]);
        let w = m1(&p, &[1.0, 2.0, 3.0, 4.0]);
        let q = Cube::new(0, [0; 3]);
        let sp = greedy_split(&s, &w, &g, &q);
        let xs: Vec<f64> = sp.order.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.1, 0.4, 0.2, 0.3]);
        assert_eq!(sp.sigma.total(), 7.0);
        assert_eq!(sp.omega.total(), 7.0);
        assert!(common_points(&sp.sigma, &sp.omega).is_empty());
    }

    #[test]
    fn greedy_split_edge_cases() {
        let g = g1();
        let q = Cube::new(0, [0; 3]);
        let s = m1(&[0.1], &[1.0]);
        let w = m1(&[0.2], &[1.0]);
        let sp = greedy_split(&s, &w, &g, &q);
        assert_eq!((sp.sigma.clone(), sp.omega.clone()), (s.clone(), w.clone()));
        let w1 = m1(&[0.1], &[3.0]);
        let sp = greedy_split(&s, &w1, &g, &q);
        assert_eq!(sp.sigma.total(), 1.0);
        assert_eq!(sp.omega.total(), 0.0);
        assert!(sp.omega.total() >= 0.5 * w1.punctured_mass(&g, &q, &common_points(&s, &w1)));
    }

    #[test]
    fn generators_deterministic() {
        let gen = Generator::PairWithCommon { count: 5, common_fraction: 1.0, mass_law: MassLaw::Unit, scale: 1.0 };
        let (a, b) = generate(7, 2, &gen);
        assert_eq!(generate(7, 2, &gen), (a.clone(), b.clone()));
        assert_eq!(common_points(&a, &b).points.len(), 5);
        let gen0 = Generator::PairWithCommon { count: 5, common_fraction: 0.0, mass_law: MassLaw::Unit, scale: 1.0 };
        let (a, b) = generate(7, 2, &gen0);
        assert!(common_points(&a, &b).is_empty());
        let (e, _) = generate(1, 1, &Generator::UniformBox { count: 0, mass_law: MassLaw::Unit, scale: 1.0 });
        assert!(e.is_empty());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AtomicMeasure::new(1, vec![[0.0; 3]], vec![0.0]).is_err());
        assert!(AtomicMeasure::new(1, vec![[0.0; 3], [0.0; 3]], vec![1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn mass_additive_and_puncture_bounded(seed in 0u64..500, lvl in -1i32..5) {
            let gen = Generator::PairWithCommon { count: 12, common_fraction: 0.5, mass_law: MassLaw::Uniform { lo: 0.1, hi: 2.0 }, scale: 1.0 };
            let (s, w) = generate(seed, 2, &gen);
            let grid = Grid::fit(2, QuasiMap::Identity, [0.0; 3], &[&s.points, &w.points], 30).unwrap();
            let cp = common_points(&s, &w);
            let q = grid.containing_cube(&w.points[0], lvl.max(grid.top)).unwrap();
            let whole = w.cube_mass(&grid, &q);
            let parts: f64 = q.children(2).iter().map(|c| w.cube_mass(&grid, c)).sum();
            prop_assert!((whole - parts).abs() <= 1e-12 * whole);
            let pm = w.punctured_mass(&grid, &q, &cp);
            prop_assert!(pm <= whole);
            let any_common = cp.points.iter().any(|p| q.contains_u(&grid.coords(p), 2));
            prop_assert_eq!(pm == whole, !any_common);
            let sp = greedy_split(&s, &w, &grid, &q);
            prop_assert!(sp.sigma.total() >= 0.5 * s.cube_mass(&grid, &q));
            prop_assert!(sp.omega.total() >= 0.5 * pm);
            prop_assert!(common_points(&sp.sigma, &sp.omega).is_empty());
        }
    }
}
