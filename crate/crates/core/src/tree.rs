//! Sparse tree of occupied cubes for one grid and a pair of measures.

use std::collections::{BTreeMap, HashMap};

use crate::geometry::{index_at, AltCube, Cube, Grid, Point};
use crate::measures::AtomicMeasure;

pub const SIGMA: usize = 0;
pub const OMEGA: usize = 1;

#[derive(Clone, Debug)]
pub struct Node {
    pub cube: Cube,
    pub parent: Option<usize>,
    /// Occupied children in lexicographic order.
    pub children: Vec<usize>,
    pub atoms: [Vec<usize>; 2],
    pub mass: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct CubeTree {
    pub grid: Grid,
    pub nodes: Vec<Node>,
    pub index: HashMap<Cube, usize>,
    pub roots: Vec<usize>,
    pub by_level: BTreeMap<i32, Vec<usize>>,
    pub points: [Vec<Point>; 2],
    pub masses: [Vec<f64>; 2],
    pub coords: [Vec<Point>; 2],
}

impl CubeTree {
    pub fn build(grid: Grid, sigma: &AtomicMeasure, omega: &AtomicMeasure) -> CubeTree {
        let points = [sigma.points.clone(), omega.points.clone()];
        let masses = [sigma.masses.clone(), omega.masses.clone()];
        let coords = [
            points[0].iter().map(|p| grid.coords(p)).collect::<Vec<_>>(),
            points[1].iter().map(|p| grid.coords(p)).collect::<Vec<_>>(),
        ];
        let mut t = CubeTree {
            grid,
            nodes: vec![],
            index: HashMap::new(),
            roots: vec![],
            by_level: BTreeMap::new(),
            points,
            masses,
            coords,
        };
        let n = t.grid.n;
        let mut tops: BTreeMap<Cube, [Vec<usize>; 2]> = BTreeMap::new();
        for w in 0..2 {
            for (i, u) in t.coords[w].iter().enumerate() {
                let c = Cube::new(t.grid.top, index_at(u, t.grid.top, n));
                tops.entry(c).or_default()[w].push(i);
            }
        }
        for (c, atoms) in tops {
            let id = t.insert(c, None, atoms);
            t.roots.push(id);
        }
        t
    }

    fn insert(&mut self, cube: Cube, parent: Option<usize>, atoms: [Vec<usize>; 2]) -> usize {
        let id = self.nodes.len();
        let mass = [
            atoms[0].iter().map(|&i| self.masses[0][i]).sum(),
            atoms[1].iter().map(|&i| self.masses[1][i]).sum(),
        ];
        self.nodes.push(Node { cube, parent, children: vec![], atoms: atoms.clone(), mass });
        self.index.insert(cube, id);
        self.by_level.entry(cube.level).or_default().push(id);
        if cube.level < self.grid.bottom {
            let n = self.grid.n;
            let mut split: BTreeMap<Cube, [Vec<usize>; 2]> = BTreeMap::new();
            for w in 0..2 {
                for &i in &atoms[w] {
                    let c = Cube::new(cube.level + 1, index_at(&self.coords[w][i], cube.level + 1, n));
                    split.entry(c).or_default()[w].push(i);
                }
            }
            for (c, a) in split {
                let kid = self.insert(c, Some(id), a);
                self.nodes[id].children.push(kid);
            }
        }
        id
    }

    pub fn n(&self) -> usize {
        self.grid.n
    }

    pub fn node(&self, c: &Cube) -> Option<usize> {
        self.index.get(c).copied()
    }

    pub fn mass(&self, c: &Cube, w: usize) -> f64 {
        self.node(c).map_or(0.0, |i| self.nodes[i].mass[w])
    }

    pub fn alt_mass(&self, k: &AltCube, w: usize) -> f64 {
        k.pieces(self.n()).iter().map(|p| self.mass(p, w)).sum()
    }

    /// Atoms of measure `w` in the alternate cube `k`.
    pub fn alt_atoms(&self, k: &AltCube, w: usize) -> Vec<usize> {
        let mut v = Vec::new();
        for p in k.pieces(self.n()) {
            if let Some(i) = self.node(&p) {
                v.extend_from_slice(&self.nodes[i].atoms[w]);
            }
        }
        v
    }

    /// Node ids in the subtree of `id`, preorder.
    pub fn subtree(&self, id: usize) -> Vec<usize> {
        let mut out = vec![];
        let mut stack = vec![id];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.nodes[v].children.iter().rev());
        }
        out
    }

    /// Node ids ordered by (level, index).
    pub fn ordered(&self) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.nodes.len()).collect();
        v.sort_by_key(|&i| self.nodes[i].cube);
        v
    }

    /// Occupied alternate cubes: the `2^n` containing each non-root node.
    pub fn alt_cubes(&self) -> Vec<AltCube> {
        let mut s = std::collections::BTreeSet::new();
        for nd in &self.nodes {
            s.extend(AltCube::containing(&nd.cube, self.n()));
        }
        s.into_iter().collect()
    }

    pub fn in_cube(&self, c: &Cube, w: usize, i: usize) -> bool {
        c.contains_u(&self.coords[w][i], self.n())
    }

    /// Maximal `J ⋐_{r,ε} K` among nodes with at least `min_atoms` atoms of `w`.
    pub fn m_deep(&self, k: &AltCube, r: u32, eps: f64, w: usize, min_atoms: usize) -> Vec<usize> {
        let keep = |c: &Cube| self.node(c).is_some_and(|i| self.nodes[i].atoms[w].len() >= min_atoms);
        self.grid.m_deep_with(k, r, eps, &keep).iter().map(|c| self.index[c]).collect()
    }

    pub fn m_deep_shift(&self, k: &AltCube, ell: u32, r: u32, eps: f64, w: usize, min_atoms: usize) -> Vec<usize> {
        let keep = |c: &Cube| self.node(c).is_some_and(|i| self.nodes[i].atoms[w].len() >= min_atoms);
        self.grid.m_deep_shift_with(k, ell, r, eps, &keep).iter().map(|c| self.index[c]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::QuasiMap;
    use crate::measures::{generate, Generator, MassLaw};

    #[test]
    fn tree_masses_match_direct_sums() {
        let gen = Generator::UniformBox { count: 20, mass_law: MassLaw::Uniform { lo: 0.5, hi: 2.0 }, scale: 1.0 };
        let (s, w) = generate(3, 2, &gen);
        let grid = Grid::fit(2, QuasiMap::Identity, [0.1, 0.2, 0.0], &[&s.points, &w.points], 30).unwrap();
        let t = CubeTree::build(grid.clone(), &s, &w);
        for nd in &t.nodes {
            assert!((nd.mass[SIGMA] - s.cube_mass(&grid, &nd.cube)).abs() < 1e-12);
            assert!((nd.mass[OMEGA] - w.cube_mass(&grid, &nd.cube)).abs() < 1e-12);
            for &c in &nd.children {
                assert_eq!(t.nodes[c].parent.map(|p| t.nodes[p].cube), Some(nd.cube));
            }
        }
        let leaves = t.nodes.iter().filter(|nd| nd.cube.level == grid.bottom);
        for nd in leaves {
            assert!(nd.atoms[SIGMA].len() <= 1 && nd.atoms[OMEGA].len() <= 1);
        }
        let root_total: f64 = t.roots.iter().map(|&r| t.nodes[r].mass[SIGMA]).sum();
        assert!((root_total - s.total()).abs() < 1e-12);
    }
}
