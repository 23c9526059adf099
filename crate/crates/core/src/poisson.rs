//! Fractional Poisson integrals as finite sums over atoms, the half-space
//! extension and its dual, and the upstairs energy measure.

use serde::{Deserialize, Serialize};

use crate::family::GridCtx;
use crate::geometry::{deeply_embedded, dist, tent_contains, Cube, GoodnessParams, Point, TentMode, UpperHalfPoint};
use crate::tree::{OMEGA, SIGMA};

/// One atom's contribution to `P_m^α(Q, ·)`: `ℓ^m / (ℓ + d)^{n+m−α}`.
#[inline]
pub fn kernel_m(n: usize, alpha: f64, m: f64, side: f64, d: f64) -> f64 {
    side.powf(m) / (side + d).powf(n as f64 + m - alpha)
}

/// One atom's contribution to `𝒫^α(Q, ·)`: `(ℓ / (ℓ + d)²)^{n−α}`.
#[inline]
pub fn kernel_repro(n: usize, alpha: f64, side: f64, d: f64) -> f64 {
    (side / ((side + d) * (side + d))).powf(n as f64 - alpha)
}

/// `P_m^α(Q, μ)` for the cube with centre `c` and side `side`.
pub fn poisson_m<'a>(n: usize, alpha: f64, m: f64, side: f64, c: &Point, atoms: impl IntoIterator<Item = (&'a Point, f64)>) -> f64 {
    atoms.into_iter().map(|(y, w)| w * kernel_m(n, alpha, m, side, dist(y, c))).sum()
}

/// `P^α(Q, μ)`.
pub fn poisson<'a>(n: usize, alpha: f64, side: f64, c: &Point, atoms: impl IntoIterator<Item = (&'a Point, f64)>) -> f64 {
    poisson_m(n, alpha, 1.0, side, c, atoms)
}

/// `𝒫^α(Q, μ)`.
pub fn poisson_repro<'a>(n: usize, alpha: f64, side: f64, c: &Point, atoms: impl IntoIterator<Item = (&'a Point, f64)>) -> f64 {
    atoms.into_iter().map(|(y, w)| w * kernel_repro(n, alpha, side, dist(y, c))).sum()
}

/// `ℙ^α μ (x, t)`.
pub fn extension<'a>(n: usize, alpha: f64, p: &UpperHalfPoint, atoms: impl IntoIterator<Item = (&'a Point, f64)>) -> f64 {
    let e = 0.5 * (n as f64 + 1.0 - alpha);
    atoms
        .into_iter()
        .map(|(y, w)| {
            let d = dist(y, &p.x);
            w * p.t / (p.t * p.t + d * d).powf(e)
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpstairsAtom {
    pub cube: Cube,
    pub at: UpperHalfPoint,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpstairsMeasure {
    pub atoms: Vec<UpstairsAtom>,
}

impl UpstairsMeasure {
    /// `μ̄ = μ / t²`.
    pub fn bar(&self) -> UpstairsMeasure {
        UpstairsMeasure {
            atoms: self
                .atoms
                .iter()
                .map(|a| UpstairsAtom { weight: a.weight / (a.at.t * a.at.t), ..a.clone() })
                .collect(),
        }
    }

    pub fn restrict(&self, keep: impl Fn(&UpstairsAtom) -> bool) -> UpstairsMeasure {
        UpstairsMeasure { atoms: self.atoms.iter().filter(|a| keep(a)).cloned().collect() }
    }

    /// `∫ t² dν`.
    pub fn t2_integral(&self) -> f64 {
        self.atoms.iter().map(|a| a.at.t * a.at.t * a.weight).sum()
    }
}

/// `ℚ^α ν (y) = Σ w t² / (t² + |x − y|²)^{(n+1−α)/2}`.
pub fn dual_poisson(n: usize, alpha: f64, nu: &UpstairsMeasure, y: &Point) -> f64 {
    let e = 0.5 * (n as f64 + 1.0 - alpha);
    nu.atoms
        .iter()
        .map(|a| {
            let d = dist(&a.at.x, y);
            a.weight * a.at.t * a.at.t / (a.at.t * a.at.t + d * d).powf(e)
        })
        .sum()
}

/// The maximal members of `stopping` strictly inside `f`.
pub fn stopping_children(stopping: &[Cube], f: &Cube) -> Vec<Cube> {
    let inside: Vec<Cube> = stopping.iter().copied().filter(|g| g != f && f.contains(g)).collect();
    inside.iter().copied().filter(|g| !inside.iter().any(|h| h != g && h.contains(g))).collect()
}

/// Membership of `j` in `C_F^{good,τ-shift}`: good, `⋐_{τ,ε} F`, and not
/// `⋐_{τ,ε}` any stopping child of `F`.
pub fn in_good_shift(ctx: &GridCtx, id: usize, f: &Cube, kids: &[Cube], p: &GoodnessParams) -> bool {
    let n = ctx.tree.n();
    let j = &ctx.tree.nodes[id].cube;
    ctx.good[id]
        && deeply_embedded(j, &f.as_alt(), p.tau, p.eps, n)
        && !kids.iter().any(|k| deeply_embedded(j, &k.as_alt(), p.tau, p.eps, n))
}

/// `‖P_{F,J}^w 𝐱‖²` for the node `j`.
pub fn localized_energy(ctx: &GridCtx, w: usize, j: usize, f: &Cube, kids: &[Cube], p: &GoodnessParams) -> f64 {
    ctx.tree
        .subtree(j)
        .into_iter()
        .filter(|&id| ctx.haar[w].x_energy[id] > 0.0 && in_good_shift(ctx, id, f, kids, p))
        .map(|id| ctx.haar[w].x_energy[id])
        .sum()
}

/// `μ = Σ_F Σ_{J ∈ M_deep(F)} ‖P_{F,J}^ω 𝐱‖² δ_{(c_J, ℓ(J))}`, keeping
/// atoms of positive weight.
pub fn energy_measure(ctx: &GridCtx, stopping: &[Cube], p: &GoodnessParams) -> UpstairsMeasure {
    let mut atoms = Vec::new();
    for f in stopping {
        let kids = stopping_children(stopping, f);
        for j in ctx.tree.m_deep(&f.as_alt(), p.r, p.eps, OMEGA, 2) {
            let weight = localized_energy(ctx, OMEGA, j, f, &kids, p);
            if weight > 0.0 {
                let cube = ctx.tree.nodes[j].cube;
                let at = UpperHalfPoint { x: ctx.grid().center(&cube), t: cube.side() };
                atoms.push(UpstairsAtom { cube, at, weight });
            }
        }
    }
    UpstairsMeasure { atoms }
}

/// `∫_{T(I)} t² dμ̄` by tent membership, and the same quantity summed over
/// `J ⊂ I` by cube containment.
pub fn tent_integral_two_ways(ctx: &GridCtx, mu: &UpstairsMeasure, i: &Cube, tau: u32) -> (f64, f64) {
    let bar = mu.bar();
    let by_tent = bar.restrict(|a| tent_contains(ctx.grid(), i, &a.at, TentMode::Full, tau)).t2_integral();
    let by_cube = mu.atoms.iter().filter(|a| i.contains(&a.cube)).map(|a| a.weight).sum();
    (by_tent, by_cube)
}

/// Ratios of the two Poisson testing inequalities at `I`:
/// `‖ℙ^α(1_I σ)‖²_{L²(μ̄)} / |I|_σ` and `∫[ℚ^α(1_Î μ̄)]² dσ / ∫_Î t² dμ̄`.
pub fn testing_ratios(ctx: &GridCtx, alpha: f64, mu: &UpstairsMeasure, i: &Cube, tau: u32) -> (f64, f64) {
    let t = &ctx.tree;
    let n = t.n();
    let bar = mu.bar();
    let Some(id) = t.node(i) else { return (0.0, 0.0) };
    let sig: Vec<(&Point, f64)> = t.nodes[id].atoms[SIGMA].iter().map(|&k| (&t.points[SIGMA][k], t.masses[SIGMA][k])).collect();
    let lhs1: f64 = bar.atoms.iter().map(|a| extension(n, alpha, &a.at, sig.iter().copied()).powi(2) * a.weight).sum();
    let m = t.nodes[id].mass[SIGMA];
    let r1 = if m > 0.0 { lhs1 / m } else { 0.0 };
    let local = bar.restrict(|a| tent_contains(ctx.grid(), i, &a.at, TentMode::Full, tau));
    let denom = local.t2_integral();
    let lhs2: f64 = (0..t.points[SIGMA].len())
        .map(|k| dual_poisson(n, alpha, &local, &t.points[SIGMA][k]).powi(2) * t.masses[SIGMA][k])
        .sum();
    let r2 = if denom > 0.0 { lhs2 / denom } else { 0.0 };
    (r1, r2)
}
