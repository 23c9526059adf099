//! Muckenhoupt-type constants over the enumerated cube family.
//!
//! The family for each grid is every occupied dyadic cube plus the `2^n`
//! alternate cubes of twice the side containing each occupied cube.
//! Shrink-to-atom limits are added as explicit candidates where they are
//! nonzero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize, Serializer};

use crate::family::{Direction, Family, GridCtx};
use crate::geometry::{dist, AltCube, Cube, Point};
use crate::poisson::poisson_repro;
use crate::tree::{CubeTree, OMEGA, SIGMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Region {
    Dyadic { cube: Cube },
    Alternate { cube: AltCube },
}

impl Region {
    pub fn side(&self) -> f64 {
        match self {
            Region::Dyadic { cube } => cube.side(),
            Region::Alternate { cube } => cube.side(),
        }
    }

    pub fn center(&self, ctx: &GridCtx) -> Point {
        match self {
            Region::Dyadic { cube } => ctx.grid().center(cube),
            Region::Alternate { cube } => ctx.grid().alt_center(cube),
        }
    }

    pub fn contains_u(&self, u: &Point, n: usize) -> bool {
        match self {
            Region::Dyadic { cube } => cube.contains_u(u, n),
            Region::Alternate { cube } => cube.contains_u(u, n),
        }
    }

    pub fn atoms(&self, t: &CubeTree, w: usize) -> Vec<usize> {
        match self {
            Region::Dyadic { cube } => t.node(cube).map_or(vec![], |i| t.nodes[i].atoms[w].clone()),
            Region::Alternate { cube } => t.alt_atoms(cube, w),
        }
    }

    pub fn mass(&self, t: &CubeTree, w: usize) -> f64 {
        match self {
            Region::Dyadic { cube } => t.mass(cube, w),
            Region::Alternate { cube } => t.alt_mass(cube, w),
        }
    }

    /// `‖P_Q^w 𝐱‖² = ∫_Q |𝐱 − m_Q|² dw`; the Haar subtree sum for dyadic cubes.
    pub fn energy(&self, ctx: &GridCtx, w: usize) -> f64 {
        let t = &ctx.tree;
        match self {
            Region::Dyadic { cube } => t.node(cube).map_or(0.0, |i| ctx.haar[w].subtree[i]),
            Region::Alternate { .. } => crate::haar::variance(t, w, &self.atoms(t, w)),
        }
    }
}

/// Dyadic nodes in (level, index) order followed by the non-dyadic
/// alternate cubes.
pub fn regions(ctx: &GridCtx) -> Vec<Region> {
    let t = &ctx.tree;
    let mut out: Vec<Region> = t.ordered().into_iter().map(|i| Region::Dyadic { cube: t.nodes[i].cube }).collect();
    for a in t.alt_cubes() {
        if a.is_dyadic(t.n()) {
            let mut idx = a.half;
            for v in idx.iter_mut() {
                *v /= 2;
            }
            if t.node(&Cube::new(a.level, idx)).is_some() {
                continue;
            }
        }
        out.push(Region::Alternate { cube: a });
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Witness {
    #[default]
    None,
    Region { grid: usize, region: Region },
    Pair { grid: usize, first: Cube, second: Cube },
    /// Shrink-to-atom limit at atom `index` of measure `measure`.
    Atom { measure: usize, index: usize, point: Vec<f64> },
    Common { point: Vec<f64> },
    /// Alternate cube with the ancestor shift `ℓ` of the refined energy.
    Shifted { grid: usize, cube: AltCube, ell: u32 },
    /// Node of a grid, used by stopping and size functionals.
    Node { grid: usize, cube: Cube },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ConstantWitness {
    pub name: String,
    pub value: f64,
    pub infinite: bool,
    pub witness: Witness,
    pub family: String,
}

impl Serialize for ConstantWitness {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("ConstantWitness", 5)?;
        st.serialize_field("name", &self.name)?;
        st.serialize_field("value", &if self.infinite { None } else { Some(self.value) })?;
        st.serialize_field("infinite", &self.infinite)?;
        st.serialize_field("witness", &self.witness)?;
        st.serialize_field("family", &self.family)?;
        st.end()
    }
}

impl ConstantWitness {
    pub fn finite(name: impl Into<String>, value: f64, witness: Witness, family: impl Into<String>) -> Self {
        ConstantWitness { name: name.into(), value, infinite: false, witness, family: family.into() }
    }

    pub fn infinite(name: impl Into<String>, witness: Witness, family: impl Into<String>) -> Self {
        ConstantWitness { name: name.into(), value: f64::INFINITY, infinite: true, witness, family: family.into() }
    }
}

pub fn family_label(fam: &Family) -> String {
    format!("dyadic+alternate, {} grid(s), relative to enumerated family", fam.grids.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Offset,
    Tailed,
    Punctured,
    Energy,
    PluggedEnergy,
    Classical,
}

fn common_flags(fam: &Family) -> [Vec<bool>; 2] {
    let mut f = [vec![false; fam.sigma.len()], vec![false; fam.omega.len()]];
    for &(i, j) in &fam.common.pairs {
        f[SIGMA][i] = true;
        f[OMEGA][j] = true;
    }
    f
}

fn punctured(t: &CubeTree, atoms: &[usize], w: usize, common: &[bool]) -> f64 {
    let total: f64 = atoms.iter().map(|&i| t.masses[w][i]).sum();
    let big = atoms.iter().filter(|&&i| common[i]).map(|&i| t.masses[w][i]).fold(0.0, f64::max);
    total - big
}

/// Candidate value of a constant at one region of one grid.
pub fn candidate(fam: &Family, kind: Kind, dir: Direction, ctx: &GridCtx, r: &Region, flags: &[Vec<bool>; 2]) -> f64 {
    let t = &ctx.tree;
    let n = t.n();
    let s = fam.s();
    let l = r.side();
    let ls = l.powf(s);
    let (p, e) = dir.sides();
    match kind {
        Kind::Classical => r.mass(t, SIGMA) * r.mass(t, OMEGA) / (ls * ls),
        Kind::Punctured => {
            let atoms = r.atoms(t, e);
            punctured(t, &atoms, e, &flags[e]) * r.mass(t, p) / (ls * ls)
        }
        Kind::Tailed => {
            let me = r.mass(t, e);
            if me == 0.0 {
                return 0.0;
            }
            let c = r.center(ctx);
            let tail = (0..t.points[p].len())
                .filter(|&i| !r.contains_u(&t.coords[p][i], n))
                .map(|i| (&t.points[p][i], t.masses[p][i]));
            poisson_repro(n, fam.alpha, l, &c, tail) * me / ls
        }
        Kind::Energy => {
            let en = r.energy(ctx, e);
            if en == 0.0 {
                return 0.0;
            }
            en / (l * l) / ls * r.mass(t, p) / ls
        }
        Kind::PluggedEnergy => {
            let en = r.energy(ctx, e);
            if en == 0.0 {
                return 0.0;
            }
            en / (l * l) / ls * split_repro(fam, ctx, r, p).2
        }
        Kind::Offset => 0.0,
    }
}

/// `𝒫^α(Q, 1_{Q^c} μ)`, `𝒫^α(Q, 1_Q μ)` and their sum.
pub fn split_repro(fam: &Family, ctx: &GridCtx, r: &Region, w: usize) -> (f64, f64, f64) {
    let t = &ctx.tree;
    let n = t.n();
    let c = r.center(ctx);
    let l = r.side();
    let (mut out, mut ins) = (0.0, 0.0);
    for i in 0..t.points[w].len() {
        let v = t.masses[w][i] * crate::poisson::kernel_repro(n, fam.alpha, l, dist(&t.points[w][i], &c));
        if r.contains_u(&t.coords[w][i], n) {
            ins += v;
        } else {
            out += v;
        }
    }
    (out, ins, out + ins)
}

/// Shrink-to-atom limit of the tailed constant at atom `i` of the energy side.
pub fn tailed_limit(fam: &Family, dir: Direction, i: usize) -> f64 {
    let (p, e) = dir.sides();
    let ms = [&fam.sigma, &fam.omega];
    let x = ms[e].points[i];
    let s = fam.s();
    let sum: f64 = ms[p]
        .points
        .iter()
        .zip(&ms[p].masses)
        .filter(|(y, _)| **y != x)
        .map(|(y, m)| m * dist(y, &x).powf(-2.0 * s))
        .sum();
    ms[e].masses[i] * sum
}

pub(crate) fn best(cands: Vec<(f64, Witness)>) -> (f64, Witness) {
    let mut out = (0.0, Witness::None);
    for (v, w) in cands {
        if v > out.0 {
            out = (v, w);
        }
    }
    out
}

fn sup_regions(fam: &Family, kind: Kind, dir: Direction) -> (f64, Witness) {
    let flags = common_flags(fam);
    let per_grid: Vec<(f64, Witness)> = fam
        .grids
        .par_iter()
        .enumerate()
        .map(|(g, ctx)| {
            best(
                regions(ctx)
                    .into_iter()
                    .map(|r| (candidate(fam, kind, dir, ctx, &r, &flags), Witness::Region { grid: g, region: r }))
                    .collect(),
            )
        })
        .collect();
    best(per_grid)
}

fn name(base: &str, dir: Direction) -> String {
    format!("{base}_{}", dir.label())
}

/// Sup over neighbour pairs of `|Q|_σ |Q′|_ω / |Q|^{2(1−α/n)}`.
pub fn offset_a2(fam: &Family) -> ConstantWitness {
    let s = fam.s();
    let per_grid: Vec<(f64, Witness)> = fam
        .grids
        .par_iter()
        .enumerate()
        .map(|(g, ctx)| {
            let t = &ctx.tree;
            let mut c = Vec::new();
            for id in t.ordered() {
                let q = t.nodes[id].cube;
                if t.nodes[id].mass[SIGMA] == 0.0 {
                    continue;
                }
                for nb in q.neighbours(t.n()) {
                    let mw = t.mass(&nb, OMEGA);
                    if mw > 0.0 {
                        let v = t.nodes[id].mass[SIGMA] * mw / q.side().powf(2.0 * s);
                        c.push((v, Witness::Pair { grid: g, first: q, second: nb }));
                    }
                }
            }
            best(c)
        })
        .collect();
    let (v, w) = best(per_grid);
    ConstantWitness::finite("offset_a2", v, w, family_label(fam))
}

pub fn tailed_a2(fam: &Family, dir: Direction) -> ConstantWitness {
    let (_, e) = dir.sides();
    let ms = [&fam.sigma, &fam.omega];
    let mut cands = vec![sup_regions(fam, Kind::Tailed, dir)];
    for i in 0..ms[e].len() {
        let v = tailed_limit(fam, dir, i);
        cands.push((v, Witness::Atom { measure: e, index: i, point: ms[e].points[i][..fam.n].to_vec() }));
    }
    let (v, w) = best(cands);
    ConstantWitness::finite(name("tailed_a2", dir), v, w, family_label(fam))
}

pub fn punctured_a2(fam: &Family, dir: Direction) -> ConstantWitness {
    let (v, w) = sup_regions(fam, Kind::Punctured, dir);
    ConstantWitness::finite(name("punctured_a2", dir), v, w, family_label(fam))
}

pub fn energy_a2(fam: &Family, dir: Direction) -> ConstantWitness {
    let (v, w) = sup_regions(fam, Kind::Energy, dir);
    ConstantWitness::finite(name("energy_a2", dir), v, w, family_label(fam))
}

pub fn plugged_energy_a2(fam: &Family, dir: Direction) -> ConstantWitness {
    let (v, w) = sup_regions(fam, Kind::PluggedEnergy, dir);
    ConstantWitness::finite(name("plugged_energy_a2", dir), v, w, family_label(fam))
}

/// Classical `A₂`: infinite as soon as a common point mass exists.
pub fn classical_a2(fam: &Family) -> ConstantWitness {
    if let Some(p) = fam.common.points.first() {
        return ConstantWitness::infinite("classical_a2", Witness::Common { point: p[..fam.n].to_vec() }, family_label(fam));
    }
    let (v, w) = sup_regions(fam, Kind::Classical, Direction::Forward);
    ConstantWitness::finite("classical_a2", v, w, family_label(fam))
}

/// Re-evaluates a constant's defining expression at a witness.
pub fn evaluate(fam: &Family, kind: Kind, dir: Direction, w: &Witness) -> f64 {
    let flags = common_flags(fam);
    match w {
        Witness::None | Witness::Shifted { .. } | Witness::Node { .. } => 0.0,
        Witness::Region { grid, region } => candidate(fam, kind, dir, &fam.grids[*grid], region, &flags),
        Witness::Pair { grid, first, second } => {
            let t = &fam.grids[*grid].tree;
            t.mass(first, SIGMA) * t.mass(second, OMEGA) / first.side().powf(2.0 * fam.s())
        }
        Witness::Atom { index, .. } => tailed_limit(fam, dir, *index),
        Witness::Common { .. } => f64::INFINITY,
    }
}

/// Per-region check of `plugged ≤ n·tailed + energy` over every grid;
/// returns the worst relative excess (≤ 0 means the bound holds).
pub fn plugged_split_excess(fam: &Family, dir: Direction) -> f64 {
    let flags = common_flags(fam);
    let n = fam.n as f64;
    fam.grids
        .par_iter()
        .map(|ctx| {
            regions(ctx)
                .into_iter()
                .map(|r| {
                    let pl = candidate(fam, Kind::PluggedEnergy, dir, ctx, &r, &flags);
                    let rhs = n * candidate(fam, Kind::Tailed, dir, ctx, &r, &flags)
                        + candidate(fam, Kind::Energy, dir, ctx, &r, &flags);
                    if rhs > 0.0 {
                        pl / rhs - 1.0
                    } else if pl > 0.0 {
                        f64::INFINITY
                    } else {
                        -1.0
                    }
                })
                .fold(-1.0, f64::max)
        })
        .reduce(|| -1.0, f64::max)
}
