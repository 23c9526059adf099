//! Measure-adapted Haar systems on a [`CubeTree`].
//!
//! At a cube with massive children `c_0..c_{k-1}` the `j`-th function is
//! proportional to `1/M_{<j}` on `c_0..c_{j-1}` and `−1/m_j` on `c_j`, which
//! gives an orthonormal mean-zero basis with positive first value.

use crate::tree::CubeTree;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Lexicographic,
    Reversed,
}

#[derive(Clone, Debug, Default)]
pub struct NodeBasis {
    /// Massive children in basis order.
    pub kids: Vec<usize>,
    /// One value per entry of `kids`, for each basis function.
    pub vecs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Haar {
    pub w: usize,
    pub bases: Vec<NodeBasis>,
    /// `‖Δ_Q 𝐱‖²`.
    pub x_energy: Vec<f64>,
    /// `Σ_{Q′ ⊂ Q} ‖Δ_{Q′} 𝐱‖²`.
    pub subtree: Vec<f64>,
}

impl Haar {
    pub fn build(tree: &CubeTree, w: usize) -> Haar {
        Self::build_ordered(tree, w, Order::Lexicographic)
    }

    pub fn build_ordered(tree: &CubeTree, w: usize, order: Order) -> Haar {
        let nn = tree.nodes.len();
        let mut bases = Vec::with_capacity(nn);
        for nd in &tree.nodes {
            let mut kids: Vec<usize> = nd.children.iter().copied().filter(|&c| tree.nodes[c].mass[w] > 0.0).collect();
            if order == Order::Reversed {
                kids.reverse();
            }
            let mut vecs = Vec::new();
            if kids.len() >= 2 {
                let mut before = tree.nodes[kids[0]].mass[w];
                for j in 1..kids.len() {
                    let mj = tree.nodes[kids[j]].mass[w];
                    let a = 1.0 / before;
                    let b = -1.0 / mj;
                    let norm = (a + 1.0 / mj).sqrt();
                    let mut v = vec![0.0; kids.len()];
                    for x in v.iter_mut().take(j) {
                        *x = a / norm;
                    }
                    v[j] = b / norm;
                    vecs.push(v);
                    before += mj;
                }
            }
            bases.push(NodeBasis { kids, vecs });
        }
        let mut h = Haar { w, bases, x_energy: vec![0.0; nn], subtree: vec![0.0; nn] };
        for id in 0..nn {
            h.x_energy[id] = (0..tree.n()).map(|d| h.coeffs(tree, id, &coordinate(tree, w, d)).iter().map(|c| c * c).sum::<f64>()).sum();
        }
        for id in (0..nn).rev() {
            // children are inserted after their parent
            h.subtree[id] = h.x_energy[id] + tree.nodes[id].children.iter().map(|&c| h.subtree[c]).sum::<f64>();
        }
        h
    }

    pub fn dim(&self, id: usize) -> usize {
        self.bases[id].vecs.len()
    }

    /// `S_c = Σ_{atoms in c} m·f` for each massive child.
    fn child_sums(&self, tree: &CubeTree, id: usize, f: &[f64]) -> Vec<f64> {
        let m = &tree.masses[self.w];
        self.bases[id].kids.iter().map(|&c| tree.nodes[c].atoms[self.w].iter().map(|&i| m[i] * f[i]).sum()).collect()
    }

    /// `⟨f, h_Q^a⟩_μ` for each `a`; `f` holds values at the atoms of `μ`.
    pub fn coeffs(&self, tree: &CubeTree, id: usize, f: &[f64]) -> Vec<f64> {
        if self.bases[id].vecs.is_empty() {
            return vec![];
        }
        let s = self.child_sums(tree, id, f);
        self.bases[id].vecs.iter().map(|v| v.iter().zip(&s).map(|(a, b)| a * b).sum()).collect()
    }

    /// `Δ_Q f` on each massive child.
    pub fn delta_on_kids(&self, tree: &CubeTree, id: usize, f: &[f64]) -> Vec<f64> {
        let c = self.coeffs(tree, id, f);
        let b = &self.bases[id];
        (0..b.kids.len()).map(|k| b.vecs.iter().zip(&c).map(|(v, a)| v[k] * a).sum()).collect()
    }

    /// `Δ_Q f` at every atom of the measure (zero outside `Q`).
    pub fn delta_at_atoms(&self, tree: &CubeTree, id: usize, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; tree.masses[self.w].len()];
        let vals = self.delta_on_kids(tree, id, f);
        for (k, &c) in self.bases[id].kids.iter().enumerate() {
            for &i in &tree.nodes[c].atoms[self.w] {
                out[i] = vals[k];
            }
        }
        out
    }

    /// All basis functions evaluated at the atoms.
    pub fn functions(&self, tree: &CubeTree, id: usize) -> Vec<Vec<f64>> {
        let b = &self.bases[id];
        b.vecs
            .iter()
            .map(|v| {
                let mut h = vec![0.0; tree.masses[self.w].len()];
                for (k, &c) in b.kids.iter().enumerate() {
                    for &i in &tree.nodes[c].atoms[self.w] {
                        h[i] = v[k];
                    }
                }
                h
            })
            .collect()
    }

    /// `Σ_{Q ∈ H} ‖Δ_Q 𝐱‖²`.
    pub fn energy_of(&self, ids: impl IntoIterator<Item = usize>) -> f64 {
        ids.into_iter().map(|i| self.x_energy[i]).sum()
    }
}

/// Coordinate `d` of the atoms of measure `w`, in physical coordinates.
pub fn coordinate(tree: &CubeTree, w: usize, d: usize) -> Vec<f64> {
    tree.points[w].iter().map(|p| p[d]).collect()
}

/// `E_Q^μ f`; `None` when `|Q|_μ = 0`.
pub fn average(tree: &CubeTree, w: usize, id: usize, f: &[f64]) -> Option<f64> {
    let nd = &tree.nodes[id];
    if nd.mass[w] <= 0.0 {
        return None;
    }
    Some(nd.atoms[w].iter().map(|&i| tree.masses[w][i] * f[i]).sum::<f64>() / nd.mass[w])
}

/// `Σ_c m_c |E_c 𝐱 − E_Q 𝐱|²`, computed without a basis.
pub fn x_energy_direct(tree: &CubeTree, w: usize, id: usize) -> f64 {
    let nd = &tree.nodes[id];
    let mut s = 0.0;
    for d in 0..tree.n() {
        let f = coordinate(tree, w, d);
        let Some(eq) = average(tree, w, id, &f) else { return 0.0 };
        for &c in &nd.children {
            if let Some(ec) = average(tree, w, c, &f) {
                s += tree.nodes[c].mass[w] * (ec - eq).powi(2);
            }
        }
    }
    s
}

/// `∫_Q |𝐱 − m_Q|² dμ` over a list of atoms.
pub fn variance(tree: &CubeTree, w: usize, atoms: &[usize]) -> f64 {
    let m = &tree.masses[w];
    let total: f64 = atoms.iter().map(|&i| m[i]).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for d in 0..tree.n() {
        let mean = atoms.iter().map(|&i| m[i] * tree.points[w][i][d]).sum::<f64>() / total;
        s += atoms.iter().map(|&i| m[i] * (tree.points[w][i][d] - mean).powi(2)).sum::<f64>();
    }
    s
}

/// Good-restricted projection energies given per-node goodness flags.
#[derive(Clone, Debug)]
pub struct GoodEnergies {
    /// `‖P_Q^{good} 𝐱‖²`: good cubes inside `Q`, including `Q`.
    pub good: Vec<f64>,
    /// `‖P_Q^{subgood} 𝐱‖²`: full subtrees of the maximal good cubes in `Q`.
    pub subgood: Vec<f64>,
}

impl GoodEnergies {
    pub fn new(tree: &CubeTree, haar: &Haar, good: &[bool]) -> Self {
        let nn = tree.nodes.len();
        let mut g = vec![0.0; nn];
        let mut sg = vec![0.0; nn];
        for id in (0..nn).rev() {
            let kids = &tree.nodes[id].children;
            g[id] = if good[id] { haar.x_energy[id] } else { 0.0 } + kids.iter().map(|&c| g[c]).sum::<f64>();
            sg[id] = if good[id] { haar.subtree[id] } else { kids.iter().map(|&c| sg[c]).sum() };
        }
        GoodEnergies { good: g, subgood: sg }
    }
}

/// Largest residual of `Σ_{Q1 ⊂ Q ⊂ Q2} Δ_Q f = E_{Q0} f − E_{Q2} f` on `Q0`,
/// where `Q0` is a child of `Q1`. `None` when `|Q0|_μ = 0`.
pub fn telescope_residual(tree: &CubeTree, haar: &Haar, f: &[f64], q0: usize, q2: usize) -> Option<f64> {
    let w = haar.w;
    let e0 = average(tree, w, q0, f)?;
    let e2 = average(tree, w, q2, f)?;
    let mut sum = 0.0;
    let mut cur = tree.nodes[q0].parent?;
    let mut below = q0;
    loop {
        let b = &haar.bases[cur];
        if let Some(k) = b.kids.iter().position(|&c| c == below) {
            sum += haar.delta_on_kids(tree, cur, f)[k];
        }
        if cur == q2 {
            break;
        }
        below = cur;
        cur = tree.nodes[cur].parent?;
    }
    Some((sum - (e0 - e2)).abs())
}

/// Gram matrix residual and Parseval residual for `f` over the whole system,
/// with one normalized constant per root.
pub fn gram_and_parseval(tree: &CubeTree, haar: &Haar, f: &[f64]) -> (f64, f64) {
    let w = haar.w;
    let m = &tree.masses[w];
    let mut funcs: Vec<Vec<f64>> = Vec::new();
    for &r in &tree.roots {
        let nd = &tree.nodes[r];
        if nd.mass[w] > 0.0 {
            let mut h = vec![0.0; m.len()];
            for &i in &nd.atoms[w] {
                h[i] = 1.0 / nd.mass[w].sqrt();
            }
            funcs.push(h);
        }
    }
    for id in 0..tree.nodes.len() {
        funcs.extend(haar.functions(tree, id));
    }
    let mut gram = 0.0f64;
    for (a, fa) in funcs.iter().enumerate() {
        for (b, fb) in funcs.iter().enumerate().skip(a) {
            let ip: f64 = (0..m.len()).map(|i| m[i] * fa[i] * fb[i]).sum();
            let target = if a == b { 1.0 } else { 0.0 };
            gram = gram.max((ip - target).abs());
        }
    }
    let norm2: f64 = (0..m.len()).map(|i| m[i] * f[i] * f[i]).sum();
    let coef2: f64 = funcs.iter().map(|h| (0..m.len()).map(|i| m[i] * h[i] * f[i]).sum::<f64>().powi(2)).sum();
    let parseval = if norm2 > 0.0 { (norm2 - coef2).abs() / norm2 } else { coef2 };
    (gram, parseval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Grid, QuasiMap};
    use crate::measures::{generate, AtomicMeasure, Generator, MassLaw};
    use crate::tree::{OMEGA, SIGMA};
    use proptest::prelude::*;

    fn two_atom() -> CubeTree {
        let w = AtomicMeasure::new(1, vec![[0.25, 0.0, 0.0], [0.75, 0.0, 0.0]], vec![1.0, 3.0]).unwrap();
        let s = AtomicMeasure::empty(1);
        let grid = Grid { n: 1, shift: [0.0; 3], top: 0, bottom: 3, lo: [-1, 0, 0], hi: [1, 0, 0], map: QuasiMap::Identity };
        CubeTree::build(grid, &s, &w)
    }

    #[test]
    fn two_atom_example() {
        let t = two_atom();
        let h = Haar::build(&t, OMEGA);
        let root = t.roots[0];
        let v = &h.bases[root].vecs;
        assert_eq!(v.len(), 1);
        // magnitudes of the mean-zero unit solution (3/√12, 1/√12)
        assert!((v[0][0].abs() - 3.0 / 12f64.sqrt()).abs() < 1e-15);
        assert!((v[0][1].abs() - 1.0 / 12f64.sqrt()).abs() < 1e-15);
        assert!(v[0][0] > 0.0);
        let x = coordinate(&t, OMEGA, 0);
        let c = h.coeffs(&t, root, &x);
        assert!((c[0].abs() - 1.5 / 12f64.sqrt()).abs() < 1e-15);
        assert!((c[0] * c[0] - 0.1875).abs() < 1e-15);
        let var = 1.0 * 0.375f64.powi(2) + 3.0 * 0.125f64.powi(2);
        assert!((h.subtree[root] - var).abs() < 1e-15);
        assert!((variance(&t, OMEGA, &t.nodes[root].atoms[OMEGA]) - var).abs() < 1e-15);
        let basis = h.functions(&t, root);
        assert_eq!(h.coeffs(&t, root, &basis[0]), vec![1.0]);
        assert!(h.coeffs(&t, root, &[2.0, 2.0]).iter().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn single_atom_has_no_basis() {
        let w = AtomicMeasure::new(1, vec![[0.3, 0.0, 0.0]], vec![2.0]).unwrap();
        let grid = Grid::fit(1, QuasiMap::Identity, [0.0; 3], &[&w.points], 30).unwrap();
        let t = CubeTree::build(grid, &AtomicMeasure::empty(1), &w);
        let h = Haar::build(&t, OMEGA);
        assert!(h.bases.iter().all(|b| b.vecs.is_empty()));
        assert!(h.subtree.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn full_dimension_count_in_plane() {
        let pts = vec![[0.1, 0.1, 0.0], [0.6, 0.1, 0.0], [0.1, 0.6, 0.0], [0.6, 0.6, 0.0]];
        let w = AtomicMeasure::new(2, pts, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let grid = Grid { n: 2, shift: [0.0; 3], top: 0, bottom: 2, lo: [0; 3], hi: [0; 3], map: QuasiMap::Identity };
        let t = CubeTree::build(grid, &AtomicMeasure::empty(2), &w);
        let h = Haar::build(&t, OMEGA);
        assert_eq!(h.dim(t.roots[0]), 3);
    }

    fn random_tree(seed: u64, n: usize, count: usize) -> CubeTree {
        let gen = Generator::UniformBox { count, mass_law: MassLaw::LogUniform { lo: 0.1, hi: 10.0 }, scale: 1.0 };
        let (s, w) = generate(seed, n, &gen);
        let grid = Grid::fit(n, QuasiMap::Identity, [0.0; 3], &[&s.points, &w.points], 40).unwrap();
        CubeTree::build(grid, &s, &w)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn invariants_on_random_measures(seed in 0u64..10_000, n in 1usize..3) {
            let t = random_tree(seed, n, 10);
            let h = Haar::build(&t, OMEGA);
            let f: Vec<f64> = (0..t.masses[OMEGA].len()).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
            let (g, p) = gram_and_parseval(&t, &h, &f);
            prop_assert!(g < 1e-9 && p < 1e-9);
            let rev = Haar::build_ordered(&t, OMEGA, Order::Reversed);
            for id in 0..t.nodes.len() {
                let direct = x_energy_direct(&t, OMEGA, id);
                prop_assert!((h.x_energy[id] - direct).abs() <= 1e-10 * (1.0 + direct));
                prop_assert!((h.x_energy[id] - rev.x_energy[id]).abs() <= 1e-10 * (1.0 + direct));
                let var = variance(&t, OMEGA, &t.nodes[id].atoms[OMEGA]);
                prop_assert!((h.subtree[id] - var).abs() <= 1e-9 * (1.0 + var));
                // |E_{I′} h| ≤ 1/√|I′|
                for v in &h.bases[id].vecs {
                    for (k, &c) in h.bases[id].kids.iter().enumerate() {
                        prop_assert!(v[k].abs() <= 1.0 / t.nodes[c].mass[OMEGA].sqrt() * (1.0 + 1e-12));
                    }
                }
                // ‖Δ_K 𝐱‖² ≤ n ℓ² |K|_ω̃ with the heaviest atom removed
                let nd = &t.nodes[id];
                let heaviest = nd.atoms[OMEGA].iter().map(|&i| t.masses[OMEGA][i]).fold(0.0, f64::max);
                let rhs = n as f64 * nd.cube.side().powi(2) * (nd.mass[OMEGA] - heaviest);
                prop_assert!(h.x_energy[id] <= rhs * (1.0 + 1e-12) + 1e-300);
            }
            for q0 in 0..t.nodes.len() {
                let mut anc = t.nodes[q0].parent;
                while let Some(q2) = anc {
                    if let Some(res) = telescope_residual(&t, &h, &f, q0, q2) {
                        prop_assert!(res < 1e-9);
                    }
                    anc = t.nodes[q2].parent;
                }
            }
            let _ = SIGMA;
        }
    }

    #[test]
    fn key_observation_sharp_in_one_dimension() {
        for seed in 0..30 {
            let t = random_tree(seed, 1, 8);
            let h = Haar::build(&t, OMEGA);
            for (id, nd) in t.nodes.iter().enumerate() {
                let heaviest = nd.atoms[OMEGA].iter().map(|&i| t.masses[OMEGA][i]).fold(0.0, f64::max);
                let rhs = nd.cube.side().powi(2) * (nd.mass[OMEGA] - heaviest);
                assert!(h.x_energy[id] <= rhs * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn good_energies_ordered() {
        let t = random_tree(11, 2, 16);
        let h = Haar::build(&t, OMEGA);
        let good: Vec<bool> = t.nodes.iter().map(|nd| t.grid.is_good(&nd.cube, 2, 0.3)).collect();
        let ge = GoodEnergies::new(&t, &h, &good);
        for id in 0..t.nodes.len() {
            assert!(ge.good[id] <= ge.subgood[id] * (1.0 + 1e-12) + 1e-300);
            assert!(ge.subgood[id] <= h.subtree[id] * (1.0 + 1e-12) + 1e-300);
        }
    }
}
