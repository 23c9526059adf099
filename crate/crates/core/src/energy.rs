//! Energy constants by dynamic programming over the cube tree, stopping and
//! functional energies, and the size functional of admissible pair sets.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::family::{Direction, Family, GridCtx};
use crate::geometry::{deeply_embedded, dist, nearby, AltCube, Cube};
use crate::muckenhoupt::{best, family_label, ConstantWitness, Region, Witness};
use crate::poisson::{kernel_m, localized_energy, stopping_children};
use crate::tree::{CubeTree, OMEGA, SIGMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hole {
    /// `1_{I∖γJ}`
    Gamma,
    /// `1_{I∖J}`
    Unit,
    /// `1_I`
    Plugged,
}

impl Hole {
    pub const ALL: [Hole; 3] = [Hole::Gamma, Hole::Unit, Hole::Plugged];

    fn slot(self) -> usize {
        match self {
            Hole::Gamma => 0,
            Hole::Unit => 1,
            Hole::Plugged => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Subgood,
    Good,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnergyVariant {
    pub hole: Hole,
    pub projection: Projection,
}

impl EnergyVariant {
    /// The deep energy constant.
    pub const DEEP: EnergyVariant = EnergyVariant { hole: Hole::Gamma, projection: Projection::Subgood };
    /// The partially plugged constant.
    pub const PARTIAL: EnergyVariant = EnergyVariant { hole: Hole::Unit, projection: Projection::Subgood };
    /// The plugged constant.
    pub const PLUGGED: EnergyVariant = EnergyVariant { hole: Hole::Plugged, projection: Projection::Subgood };
    /// The ingredient of the strong constant.
    pub const STRONG: EnergyVariant = EnergyVariant { hole: Hole::Plugged, projection: Projection::Full };

    pub fn label(&self) -> String {
        let h = match self.hole {
            Hole::Gamma => "gamma",
            Hole::Unit => "unit",
            Hole::Plugged => "plugged",
        };
        let p = match self.projection {
            Projection::Subgood => "subgood",
            Projection::Good => "good",
            Projection::Full => "full",
        };
        format!("{h}_{p}")
    }
}

/// `‖P_J 𝐱‖²` on side `w` for the chosen projection.
pub fn projection_energy(ctx: &GridCtx, w: usize, j: usize, proj: Projection) -> f64 {
    match proj {
        Projection::Subgood => ctx.energies[w].subgood[j],
        Projection::Good => ctx.energies[w].good[j],
        Projection::Full => ctx.haar[w].subtree[j],
    }
}

/// Per-grid kernel values `P^α(J, δ_y)` for the Poisson-side atoms, tagged
/// by position: 0 outside `γJ`, 1 in `γJ ∖ J`, 2 in `J`.
struct Kernels<'a> {
    ctx: &'a GridCtx,
    n: usize,
    alpha: f64,
    gamma: f64,
    p: usize,
    cache: HashMap<usize, Vec<(f64, u8)>>,
}

impl<'a> Kernels<'a> {
    fn new(fam: &Family, ctx: &'a GridCtx, p: usize) -> Self {
        Kernels { ctx, n: fam.n, alpha: fam.alpha, gamma: fam.params.gamma, p, cache: HashMap::new() }
    }

    fn ensure(&mut self, j: usize) {
        if self.cache.contains_key(&j) {
            return;
        }
        let t = &self.ctx.tree;
        let cube = t.nodes[j].cube;
        let c = t.grid.center(&cube);
        let l = cube.side();
        let v = (0..t.points[self.p].len())
            .map(|i| {
                let u = &t.coords[self.p][i];
                let class = if cube.contains_u(u, self.n) {
                    2
                } else if t.grid.in_dilate(&cube, self.gamma, u) {
                    1
                } else {
                    0
                };
                (kernel_m(self.n, self.alpha, 1.0, l, dist(&t.points[self.p][i], &c)), class)
            })
            .collect();
        self.cache.insert(j, v);
    }

    /// `P^α(J, 1_{hole} μ) / ℓ(J)` for the three holes, summed over `outer`
    /// in order; excluded atoms add `0.0` so the three sums are ordered.
    fn ratios(&self, j: usize, outer: &[usize]) -> [f64; 3] {
        let k = &self.cache[&j];
        let m = &self.ctx.tree.masses[self.p];
        let mut s = [0.0; 3];
        for &i in outer {
            let (kv, class) = k[i];
            let v = m[i] * kv;
            s[0] += if class == 0 { v } else { 0.0 };
            s[1] += if class <= 1 { v } else { 0.0 };
            s[2] += v;
        }
        let l = self.ctx.tree.nodes[j].cube.side();
        [s[0] / l, s[1] / l, s[2] / l]
    }

    /// `P^α(J, h μ) / ℓ(J)` over all atoms.
    fn weighted(&self, j: usize, h: &[f64]) -> f64 {
        let k = &self.cache[&j];
        let m = &self.ctx.tree.masses[self.p];
        let s: f64 = k.iter().enumerate().map(|(i, &(kv, _))| h[i] * m[i] * kv).sum();
        s / self.ctx.tree.nodes[j].cube.side()
    }
}

fn term(kern: &Kernels, ctx: &GridCtx, e: usize, list: &[usize], outer: &[usize], proj: Projection) -> [f64; 3] {
    let mut out = [0.0; 3];
    for &j in list {
        let en = projection_energy(ctx, e, j, proj);
        let r = kern.ratios(j, outer);
        for h in 0..3 {
            out[h] += r[h] * r[h] * en;
        }
    }
    out
}

/// `M_deep(Q)` for every node, pruned to cubes carrying two energy-side atoms.
fn deep_lists(ctx: &GridCtx, r: u32, eps: f64, e: usize) -> Vec<Vec<usize>> {
    let t = &ctx.tree;
    t.nodes.iter().map(|nd| t.m_deep(&nd.cube.as_alt(), r, eps, e, 2)).collect()
}

/// The maximal partition sum at node `i` for all three holes at once.
fn partition_max(kern: &Kernels, ctx: &GridCtx, e: usize, lists: &[Vec<usize>], i: usize, proj: Projection) -> [f64; 3] {
    let t = &ctx.tree;
    let outer = &t.nodes[i].atoms[kern.p];
    let sub = t.subtree(i);
    let mut val: HashMap<usize, [f64; 3]> = HashMap::with_capacity(sub.len());
    for &q in sub.iter().rev() {
        let own = term(kern, ctx, e, &lists[q], outer, proj);
        let mut kids = [0.0; 3];
        for c in &t.nodes[q].children {
            let v = val[c];
            for h in 0..3 {
                kids[h] += v[h];
            }
        }
        let mut best = [0.0; 3];
        for h in 0..3 {
            best[h] = own[h].max(kids[h]);
        }
        val.insert(q, best);
    }
    val[&i]
}

fn deep_grid(fam: &Family, g: usize, dir: Direction, proj: Projection) -> [(f64, Witness); 3] {
    let ctx = &fam.grids[g];
    let (p, e) = dir.sides();
    let lists = deep_lists(ctx, fam.params.r, fam.params.eps, e);
    let mut kern = Kernels::new(fam, ctx, p);
    for l in &lists {
        for &j in l {
            kern.ensure(j);
        }
    }
    let t = &ctx.tree;
    let mut out: [(f64, Witness); 3] = Default::default();
    for i in t.ordered() {
        let m = t.nodes[i].mass[p];
        if m <= 0.0 {
            continue;
        }
        let v = partition_max(&kern, ctx, e, &lists, i, proj);
        for h in 0..3 {
            let x = v[h] / m;
            if x > out[h].0 {
                out[h] = (x, Witness::Region { grid: g, region: Region::Dyadic { cube: t.nodes[i].cube } });
            }
        }
    }
    out
}

fn name(base: &str, v: EnergyVariant, dir: Direction) -> String {
    format!("{base}_{}_{}", v.label(), dir.label())
}

/// The deep energy constant for all three holes with one projection.
pub fn deep_energy_holes(fam: &Family, dir: Direction, proj: Projection) -> [ConstantWitness; 3] {
    let per: Vec<[(f64, Witness); 3]> = (0..fam.grids.len()).into_par_iter().map(|g| deep_grid(fam, g, dir, proj)).collect();
    Hole::ALL.map(|h| {
        let (v, w) = best(per.iter().map(|x| x[h.slot()].clone()).collect());
        let var = EnergyVariant { hole: h, projection: proj };
        ConstantWitness::finite(name("deep_energy", var, dir), v, w, family_label(fam))
    })
}

/// `sup_I (1/|I|_σ) sup_{I = ∪ I_r} Σ_r Σ_{J ∈ M_deep(I_r)} (P^α(J, 1_{hole}σ)/ℓJ)² ‖P_J 𝐱‖²`
/// over dyadic `I` of every grid.
pub fn deep_energy(fam: &Family, dir: Direction, v: EnergyVariant) -> ConstantWitness {
    let [a, b, c] = deep_energy_holes(fam, dir, v.projection);
    match v.hole {
        Hole::Gamma => a,
        Hole::Unit => b,
        Hole::Plugged => c,
    }
}

/// The partition value at one dyadic node, divided by `|I|_σ`.
pub fn deep_energy_at(fam: &Family, dir: Direction, v: EnergyVariant, g: usize, cube: &Cube) -> f64 {
    let ctx = &fam.grids[g];
    let (p, e) = dir.sides();
    let Some(i) = ctx.tree.node(cube) else { return 0.0 };
    let m = ctx.tree.nodes[i].mass[p];
    if m <= 0.0 {
        return 0.0;
    }
    let lists = deep_lists(ctx, fam.params.r, fam.params.eps, e);
    let mut kern = Kernels::new(fam, ctx, p);
    for q in ctx.tree.subtree(i) {
        for &j in &lists[q] {
            kern.ensure(j);
        }
    }
    partition_max(&kern, ctx, e, &lists, i, v.projection)[v.hole.slot()] / m
}

fn refined_grid(fam: &Family, g: usize, dir: Direction, proj: Projection) -> [(f64, Witness); 3] {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    let (p, e) = dir.sides();
    let mut kern = Kernels::new(fam, ctx, p);
    let mut out: [(f64, Witness); 3] = Default::default();
    for k in t.alt_cubes() {
        let m = t.alt_mass(&k, p);
        if m <= 0.0 {
            continue;
        }
        let outer = t.alt_atoms(&k, p);
        for ell in 0..=fam.params.tau {
            let list = t.m_deep_shift(&k, ell, fam.params.r, fam.params.eps, e, 2);
            for &j in &list {
                kern.ensure(j);
            }
            let v = term(&kern, ctx, e, &list, &outer, proj);
            for h in 0..3 {
                let x = v[h] / m;
                if x > out[h].0 {
                    out[h] = (x, Witness::Shifted { grid: g, cube: k, ell });
                }
            }
        }
    }
    out
}

pub fn refined_energy_holes(fam: &Family, dir: Direction, proj: Projection) -> [ConstantWitness; 3] {
    let per: Vec<[(f64, Witness); 3]> = (0..fam.grids.len()).into_par_iter().map(|g| refined_grid(fam, g, dir, proj)).collect();
    Hole::ALL.map(|h| {
        let (v, w) = best(per.iter().map(|x| x[h.slot()].clone()).collect());
        let var = EnergyVariant { hole: h, projection: proj };
        ConstantWitness::finite(name("refined_energy", var, dir), v, w, family_label(fam))
    })
}

/// `sup_{D, I alternate, ℓ ≤ τ} (1/|I|_σ) Σ_{J ∈ M^ℓ(I)} (P^α(J, 1_{hole}σ)/ℓJ)² ‖P_J 𝐱‖²`.
pub fn refined_energy(fam: &Family, dir: Direction, v: EnergyVariant) -> ConstantWitness {
    let [a, b, c] = refined_energy_holes(fam, dir, v.projection);
    match v.hole {
        Hole::Gamma => a,
        Hole::Unit => b,
        Hole::Plugged => c,
    }
}

pub fn refined_energy_at(fam: &Family, dir: Direction, v: EnergyVariant, g: usize, k: &AltCube, ell: u32) -> f64 {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    let (p, e) = dir.sides();
    let m = t.alt_mass(k, p);
    if m <= 0.0 {
        return 0.0;
    }
    let mut kern = Kernels::new(fam, ctx, p);
    let list = t.m_deep_shift(k, ell, fam.params.r, fam.params.eps, e, 2);
    for &j in &list {
        kern.ensure(j);
    }
    term(&kern, ctx, e, &list, &t.alt_atoms(k, p), v.projection)[v.hole.slot()] / m
}

/// Plugged deep energy plus plugged refined energy, both with the full
/// projection.
pub fn strong_energy(fam: &Family, dir: Direction) -> ConstantWitness {
    let d = deep_energy(fam, dir, EnergyVariant::STRONG);
    let r = refined_energy(fam, dir, EnergyVariant::STRONG);
    let w = if d.value >= r.value { d.witness } else { r.witness };
    ConstantWitness::finite(format!("strong_energy_{}", dir.label()), d.value + r.value, w, family_label(fam))
}

/// `Σ_{J ∈ M_{τ-deep}(I)} (P^α(J, 1_{S∖γJ}σ)/ℓJ)² ‖P_J^{subgood} 𝐱‖²` in grid `g`.
pub fn stopping_term(fam: &Family, g: usize, dir: Direction, i: usize, s: usize) -> f64 {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    let (p, e) = dir.sides();
    let list = t.m_deep(&t.nodes[i].cube.as_alt(), fam.params.tau, fam.params.eps, e, 2);
    let mut kern = Kernels::new(fam, ctx, p);
    for &j in &list {
        kern.ensure(j);
    }
    term(&kern, ctx, e, &list, &t.nodes[s].atoms[p], Projection::Subgood)[0]
}

/// `stopping_term(I, S)` for every `I` in `nodes`, sharing one kernel cache.
pub fn stopping_terms(fam: &Family, g: usize, dir: Direction, s: usize, nodes: &[usize]) -> Vec<f64> {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    let (p, e) = dir.sides();
    let mut kern = Kernels::new(fam, ctx, p);
    let outer = &t.nodes[s].atoms[p];
    nodes
        .iter()
        .map(|&i| {
            let list = t.m_deep(&t.nodes[i].cube.as_alt(), fam.params.tau, fam.params.eps, e, 2);
            for &j in &list {
                kern.ensure(j);
            }
            term(&kern, ctx, e, &list, outer, Projection::Subgood)[0]
        })
        .collect()
}

/// `sup_{I ∈ C_S} (1/|I|_σ) · stopping_term(I, S)`, with the maximizing node.
pub fn stopping_energy(fam: &Family, g: usize, dir: Direction, s: usize, corona: &[usize]) -> (f64, Option<usize>) {
    let t = &fam.grids[g].tree;
    let (p, _) = dir.sides();
    let mut out = (0.0, None);
    for &i in corona {
        let m = t.nodes[i].mass[p];
        if m <= 0.0 {
            continue;
        }
        let v = stopping_term(fam, g, dir, i, s) / m;
        if v > out.0 {
            out = (v, Some(i));
        }
    }
    out
}

/// Largest `Σ_{F′ ⊂ F} |F′|_σ / |F|_σ` over `F` in the collection, with the
/// maximizing node.
pub fn carleson_norm(t: &CubeTree, w: usize, family: &[usize]) -> (f64, Option<usize>) {
    let mut out = (0.0, None);
    for &f in family {
        let cf = t.nodes[f].cube;
        let m = t.nodes[f].mass[w];
        if m <= 0.0 {
            continue;
        }
        let s: f64 = family.iter().filter(|&&g| cf.contains(&t.nodes[g].cube)).map(|&g| t.nodes[g].mass[w]).sum();
        if s / m > out.0 {
            out = (s / m, Some(f));
        }
    }
    out
}

/// `Σ_{F ∈ 𝓕} Σ_{J ∈ M_deep(F)} (P^α(J, hσ)/ℓJ)² ‖P_{C_F^{good,τ-shift}; J}^ω 𝐱‖²`
/// in grid `g`, after checking that `𝓕` is σ-Carleson with norm at most `c`.
pub fn functional_energy_lhs(fam: &Family, g: usize, family: &[usize], h: &[f64], c: f64) -> Result<f64> {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    if h.len() != t.points[SIGMA].len() {
        return Err(Error::Hypothesis(format!("h has {} values for {} σ-atoms", h.len(), t.points[SIGMA].len())));
    }
    let (norm, at) = carleson_norm(t, SIGMA, family);
    if norm > c {
        let cube = at.map(|i| t.nodes[i].cube);
        return Err(Error::NotCarleson(format!("norm {norm} > {c} at {cube:?}")));
    }
    let cubes: Vec<Cube> = family.iter().map(|&f| t.nodes[f].cube).collect();
    let mut kern = Kernels::new(fam, ctx, SIGMA);
    let mut total = 0.0;
    for f in &cubes {
        let kids = stopping_children(&cubes, f);
        for j in t.m_deep(&f.as_alt(), fam.params.r, fam.params.eps, OMEGA, 2) {
            let en = localized_energy(ctx, OMEGA, j, f, &kids, &fam.params);
            if en > 0.0 {
                kern.ensure(j);
                let r = kern.weighted(j, h);
                total += r * r * en;
            }
        }
    }
    Ok(total)
}

/// `A`-admissible pairs `(I, J)` of node ids in one grid.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdmissiblePairs {
    pub grid: usize,
    pub a: usize,
    pub pairs: Vec<(usize, usize)>,
    pub reduced: bool,
}

impl AdmissiblePairs {
    /// `Π₁P`, sorted.
    pub fn firsts(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// `Π₂P`, sorted.
    pub fn seconds(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn by_second(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(i, j) in &self.pairs {
            m.entry(j).or_default().push(i);
        }
        m
    }

    pub fn subset(&self, keep: impl Fn(&(usize, usize)) -> bool) -> AdmissiblePairs {
        AdmissiblePairs { pairs: self.pairs.iter().copied().filter(|p| keep(p)).collect(), ..self.clone() }
    }

    /// Checks every defining property, naming the first violating pair.
    pub fn validate(&self, fam: &Family) -> Result<()> {
        let ctx = &fam.grids[self.grid];
        let t = &ctx.tree;
        let n = t.n();
        let a = t.nodes[self.a].cube;
        let bad = |i: usize, j: usize, why: &str| {
            Error::NotAdmissible(format!("({:?}, {:?}): {why}", t.nodes[i].cube, t.nodes[j].cube))
        };
        for &(i, j) in &self.pairs {
            let ci = t.nodes[i].cube;
            if ci == a || !a.contains(&ci) {
                return Err(bad(i, j, "I is not a proper subcube of A"));
            }
            if !ctx.tau_good[j] {
                return Err(bad(i, j, "J is not τ-good"));
            }
            if !deeply_embedded(&t.nodes[j].cube, &ci.as_alt(), fam.params.rho - 1, fam.params.eps, n) {
                return Err(bad(i, j, "J is not (ρ−1,ε)-deeply embedded in I"));
            }
        }
        for (j, is) in self.by_second() {
            for &i in &is {
                let ci = t.nodes[i].cube;
                let above = is.iter().any(|&k| k != i && t.nodes[k].cube.contains(&ci));
                if above {
                    let parent = t.nodes[i].parent.expect("proper subcube of A has a parent");
                    if !is.contains(&parent) {
                        return Err(bad(i, j, "not tree-connected in the first component"));
                    }
                }
            }
            if self.reduced {
                let top = is.iter().copied().max_by_key(|&i| std::cmp::Reverse(t.nodes[i].cube.level)).expect("nonempty");
                if !ctx.good[top] {
                    return Err(bad(top, j, "maximal I is not good in a reduced collection"));
                }
            }
        }
        Ok(())
    }
}

/// Optional localization of the size functional to a cube `S`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Localize {
    pub s: usize,
}

/// Good nodes inside some member of `Π₁P ∪ Π₂P`.
pub fn good_below(ctx: &GridCtx, pairs: &AdmissiblePairs) -> Vec<usize> {
    let t = &ctx.tree;
    let mut roots = pairs.firsts();
    roots.extend(pairs.seconds());
    let mut seen = std::collections::BTreeSet::new();
    for r in roots {
        for q in t.subtree(r) {
            if ctx.good[q] {
                seen.insert(q);
            }
        }
    }
    seen.into_iter().collect()
}

/// Good nodes that are `(ρ−τ)`-nearby in `S`, together with the maximal good
/// nodes `I ⊂ S` with `3I ⊂ S`.
pub fn localized_tests(fam: &Family, ctx: &GridCtx, s: usize) -> Vec<usize> {
    let t = &ctx.tree;
    let cs = t.nodes[s].cube;
    let mut out = std::collections::BTreeSet::new();
    let depth = fam.params.rho - fam.params.tau;
    let mut stack = vec![s];
    let mut whitney_done = vec![false; t.nodes.len()];
    while let Some(q) = stack.pop() {
        let cq = t.nodes[q].cube;
        if ctx.good[q] && nearby(&cq, &cs, depth) {
            out.insert(q);
        }
        let whitney = ctx.good[q] && t.grid.dilate_inside(&cq, 3.0, &cs.as_alt());
        let covered = t.nodes[q].parent.is_some_and(|p| whitney_done[p]);
        if whitney && !covered {
            out.insert(q);
        }
        whitney_done[q] = (whitney && !covered) || covered;
        stack.extend(t.nodes[q].children.iter().copied());
    }
    out.into_iter().collect()
}

/// One candidate of the size functional at test node `k`, with Poisson hole
/// `A ∖ H` for the node `h` (`h = k` for the plain functional).
pub fn size_candidate(fam: &Family, pairs: &AdmissiblePairs, dir: Direction, k: usize, h: usize, seconds: &[usize]) -> f64 {
    let ctx = &fam.grids[pairs.grid];
    let t = &ctx.tree;
    let (p, e) = dir.sides();
    let m = t.nodes[k].mass[p];
    if m <= 0.0 {
        return 0.0;
    }
    let n = t.n();
    let ck = t.nodes[k].cube;
    let ch = t.nodes[h].cube;
    let tent: f64 = seconds
        .iter()
        .filter(|&&j| deeply_embedded(&t.nodes[j].cube, &ck.as_alt(), fam.params.tau, fam.params.eps, n))
        .map(|&j| ctx.haar[e].x_energy[j])
        .sum();
    if tent == 0.0 {
        return 0.0;
    }
    let c = t.grid.center(&ck);
    let l = ck.side();
    let outside: f64 = t.nodes[pairs.a].atoms[p]
        .iter()
        .filter(|&&i| !ch.contains_u(&t.coords[p][i], n))
        .map(|&i| t.masses[p][i] * kernel_m(n, fam.alpha, 1.0, l, dist(&t.points[p][i], &c)))
        .sum();
    let r = outside / l;
    r * r * tent / m
}

/// `sup_{K ∈ Π^{goodbelow}P} (1/|K|_σ)(P^α(K, 1_{A∖K}σ)/ℓK)² Σ_{J ∈ Π₂P, J ⋐_{τ,ε} K} ‖Δ_J 𝐱‖²`,
/// with the maximizing test node. The localized form tests the nearby and
/// Whitney good cubes of `S` and uses the hole `A ∖ S`.
pub fn size_functional(fam: &Family, pairs: &AdmissiblePairs, dir: Direction, local: Option<Localize>) -> Result<(f64, Option<usize>)> {
    pairs.validate(fam)?;
    let ctx = &fam.grids[pairs.grid];
    let seconds = pairs.seconds();
    let tests = match local {
        None => good_below(ctx, pairs),
        Some(Localize { s }) => localized_tests(fam, ctx, s),
    };
    let mut out = (0.0, None);
    for k in tests {
        let h = local.map_or(k, |l| l.s);
        let v = size_candidate(fam, pairs, dir, k, h, &seconds);
        if v > out.0 {
            out = (v, Some(k));
        }
    }
    Ok(out)
}
