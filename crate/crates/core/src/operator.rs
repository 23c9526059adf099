//! Truncated fractional kernels, operator matrices on atomic measures,
//! their norms, testing and weak boundedness constants, and the ratio
//! diagnostics of the monotonicity and energy lemmas.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::family::{Direction, Family, GridCtx};
use crate::geometry::{dist, Point};
use crate::haar::variance;
use crate::measures::AtomicMeasure;
use crate::muckenhoupt::{best, family_label, regions, ConstantWitness, Region, Witness};
use crate::poisson::poisson_m;
use crate::tree::{OMEGA, SIGMA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelFamily {
    /// `w^ℓ / |w|^{n+1−α}` with `ℓ = component` (0-based).
    RieszComponent { component: usize },
    /// All `n` components, stacked.
    RieszVector,
    /// `(Σ_d c_d w^d / |w|) |w|^{α−n}`.
    Custom { coefficients: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truncation {
    Tangent { delta: f64, r_max: f64 },
    Cutoff { delta: f64, r_max: f64 },
    None,
}

impl Truncation {
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Truncation::Tangent { delta, r_max } | Truncation::Cutoff { delta, r_max } => Some((delta, r_max)),
            Truncation::None => None,
        }
    }

    pub fn with_bounds(&self, delta: f64, r_max: f64) -> Truncation {
        match self {
            Truncation::Tangent { .. } => Truncation::Tangent { delta, r_max },
            Truncation::Cutoff { .. } => Truncation::Cutoff { delta, r_max },
            Truncation::None => Truncation::None,
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub alpha: f64,
    pub family: KernelFamily,
    pub truncation: Truncation,
    #[serde(default = "one")]
    pub c_cz: f64,
    #[serde(default = "one")]
    pub delta_smooth: f64,
}

impl KernelSpec {
    pub fn riesz(alpha: f64, component: usize, truncation: Truncation) -> Self {
        KernelSpec { alpha, family: KernelFamily::RieszComponent { component }, truncation, c_cz: 1.0, delta_smooth: 1.0 }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < n as f64) {
            return Err(param("kernel.alpha", format!("must lie in [0, {n})")));
        }
        match &self.family {
            KernelFamily::RieszComponent { component } if *component >= n => {
                return Err(param("kernel.family.component", format!("must be below {n}")));
            }
            KernelFamily::Custom { coefficients } if coefficients.len() != n => {
                return Err(param("kernel.family.coefficients", format!("need {n} values")));
            }
            _ => {}
        }
        if let Some((d, r)) = self.truncation.bounds() {
            if !(d > 0.0 && d < r && r.is_finite()) {
                return Err(param("kernel.truncation", "need 0 < delta < r_max < ∞"));
            }
        }
        if !(self.c_cz > 0.0) {
            return Err(param("kernel.c_cz", "must be positive"));
        }
        if !(self.delta_smooth > 0.0 && self.delta_smooth <= 1.0) {
            return Err(param("kernel.delta_smooth", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn components(&self, n: usize) -> usize {
        match self.family {
            KernelFamily::RieszVector => n,
            _ => 1,
        }
    }

    pub fn untruncated(&self) -> KernelSpec {
        KernelSpec { truncation: Truncation::None, ..self.clone() }
    }

    /// Radial profile `ψ(r)`; `r^{α−n}` untruncated.
    pub fn psi(&self, n: usize, r: f64) -> f64 {
        let s = n as f64 - self.alpha;
        match self.truncation {
            Truncation::None => r.powf(-s),
            _ if r == 0.0 => 0.0,
            Truncation::Cutoff { delta, r_max } => {
                if r >= delta && r <= r_max {
                    r.powf(-s)
                } else {
                    0.0
                }
            }
            Truncation::Tangent { delta, r_max } => {
                if r < delta {
                    delta.powf(-s) * (s + 1.0 - s * r / delta)
                } else if r <= r_max {
                    r.powf(-s)
                } else {
                    (r_max.powf(-s) * (1.0 - s * (r - r_max) / r_max)).max(0.0)
                }
            }
        }
    }

    /// `K(w)` for each component; zero on the diagonal under truncation.
    pub fn eval(&self, n: usize, w: &Point) -> Result<Vec<f64>> {
        let r = w[..n].iter().map(|x| x * x).sum::<f64>().sqrt();
        if r == 0.0 {
            return match self.truncation {
                Truncation::None => Err(Error::Singular),
                _ => Ok(vec![0.0; self.components(n)]),
            };
        }
        let p = self.psi(n, r);
        Ok(match &self.family {
            KernelFamily::RieszComponent { component } => vec![w[*component] / r * p],
            KernelFamily::RieszVector => (0..n).map(|d| w[d] / r * p).collect(),
            KernelFamily::Custom { coefficients } => {
                vec![coefficients.iter().zip(w.iter()).map(|(c, x)| c * x).sum::<f64>() / r * p]
            }
        })
    }
}

/// `S = R (n−α+1)/(n−α)`, where the outer tangent line vanishes.
pub fn tangent_zero(n: usize, alpha: f64, r_max: f64) -> f64 {
    let s = n as f64 - alpha;
    r_max * (s + 1.0) / s
}

/// `δ = ½ min |x − y|` over σ/ω atom pairs at positive distance and
/// `R = 2 diam(supp σ ∪ supp ω)`.
pub fn default_bounds(sigma: &AtomicMeasure, omega: &AtomicMeasure) -> (f64, f64) {
    let mut dmin = f64::INFINITY;
    for x in &sigma.points {
        for y in &omega.points {
            let d = dist(x, y);
            if d > 0.0 && d < dmin {
                dmin = d;
            }
        }
    }
    let all: Vec<&Point> = sigma.points.iter().chain(omega.points.iter()).collect();
    let mut diam: f64 = 0.0;
    for (i, a) in all.iter().enumerate() {
        for b in &all[i + 1..] {
            diam = diam.max(dist(a, b));
        }
    }
    if !dmin.is_finite() {
        dmin = 1.0;
    }
    if diam <= 0.0 {
        diam = 1.0;
    }
    (0.5 * dmin, 2.0 * diam.max(dmin))
}

/// The truncations `(2^{−k}δ, 2^k R)` for `k = 0..=steps`.
pub fn truncation_sweep(base: &Truncation, steps: u32) -> Vec<Truncation> {
    match base.bounds() {
        None => vec![*base],
        Some((d, r)) => (0..=steps).map(|k| base.with_bounds(d / 2f64.powi(k as i32), r * 2f64.powi(k as i32))).collect(),
    }
}

fn diff(a: &Point, b: &Point) -> Point {
    let mut w = [0.0; 3];
    for d in 0..3 {
        w[d] = a[d] - b[d];
    }
    w
}

/// Rows are `(component, ω-atom)`, columns σ-atoms; entries
/// `K(y_i − x_j) √(m^σ_j m^ω_i)`.
pub fn operator_matrix(sigma: &AtomicMeasure, omega: &AtomicMeasure, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = sigma.n;
    let c = spec.components(n);
    let (rows, cols) = (omega.len(), sigma.len());
    let entries: Vec<Vec<Vec<f64>>> = (0..rows)
        .into_par_iter()
        .map(|i| {
            (0..cols)
                .map(|j| {
                    let k = spec.eval(n, &diff(&omega.points[i], &sigma.points[j]))?;
                    let s = (sigma.masses[j] * omega.masses[i]).sqrt();
                    Ok(k.into_iter().map(|v| v * s).collect())
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::zeros(c * rows, cols);
    for (i, row) in entries.iter().enumerate() {
        for (j, ks) in row.iter().enumerate() {
            for (l, &v) in ks.iter().enumerate() {
                m[(l * rows + i, j)] = v;
            }
        }
    }
    Ok(m)
}

/// Largest singular value by power iteration on `MᵀM`, with the iteration
/// count.
pub fn power_iteration(m: &DMatrix<f64>, tol: f64, cap: usize) -> Result<(f64, usize)> {
    let cols = m.ncols();
    if cols == 0 || m.nrows() == 0 {
        return Ok((0.0, 0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut v = DVector::from_fn(cols, |_, _| 1.0 + 0.01 * rng.gen::<f64>());
    v /= v.norm();
    let mut last = 0.0;
    let mut resid = f64::INFINITY;
    for it in 1..=cap {
        let mv = m * &v;
        let lam = mv.norm();
        if lam == 0.0 {
            return Ok((0.0, it));
        }
        let w = m.transpose() * mv;
        let wn = w.norm();
        if wn == 0.0 {
            return Ok((lam, it));
        }
        v = w / wn;
        resid = (lam - last).abs() / lam;
        if resid <= tol {
            return Ok((lam, it));
        }
        last = lam;
    }
    Err(Error::NoConvergence { iterations: cap, residual: resid })
}

/// Largest singular value by a dense decomposition.
pub fn svd_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    Closed,
    Dense,
    Power,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormResult {
    pub norm: f64,
    pub iterations: usize,
    pub method: NormMethod,
}

pub const DENSE_LIMIT: usize = 64;

/// `𝔑`: the operator norm of `f ↦ T(fσ)` from `L²(σ)` to `L²(ω)`.
pub fn op_norm(sigma: &AtomicMeasure, omega: &AtomicMeasure, spec: &KernelSpec, tol: f64) -> Result<NormResult> {
    let m = operator_matrix(sigma, omega, spec)?;
    if m.nrows() == 0 || m.ncols() == 0 {
        return Ok(NormResult { norm: 0.0, iterations: 0, method: NormMethod::Closed });
    }
    if m.ncols() == 1 {
        return Ok(NormResult { norm: m.norm(), iterations: 0, method: NormMethod::Closed });
    }
    if sigma.len() <= DENSE_LIMIT && omega.len() <= DENSE_LIMIT {
        return Ok(NormResult { norm: svd_norm(&m), iterations: 0, method: NormMethod::Dense });
    }
    let (norm, iterations) = power_iteration(&m, tol, 100_000)?;
    Ok(NormResult { norm, iterations, method: NormMethod::Power })
}

/// `max` of `op_norm` over a list of truncations.
pub fn op_norm_sweep(sigma: &AtomicMeasure, omega: &AtomicMeasure, spec: &KernelSpec, sweep: &[Truncation], tol: f64) -> Result<NormResult> {
    let mut out = NormResult { norm: 0.0, iterations: 0, method: NormMethod::Closed };
    for t in sweep {
        let r = op_norm(sigma, omega, &KernelSpec { truncation: *t, ..spec.clone() }, tol)?;
        if r.norm > out.norm {
            out = r;
        }
    }
    Ok(out)
}

fn region_dilate_contains(ctx: &GridCtx, r: &Region, factor: f64, u: &Point) -> bool {
    let n = ctx.tree.n();
    let c = match r {
        Region::Dyadic { cube } => cube.center_u(n),
        Region::Alternate { cube } => cube.center_u(n),
    };
    let h = 0.5 * factor * r.side();
    (0..n).all(|d| u[d] >= c[d] - h && u[d] < c[d] + h)
}

/// `‖1_{Q or 3Q} T(1_Q μ)‖_{L²(ν)}² / |Q|_μ` at one region, where `μ` is the
/// input side of the direction.
fn testing_candidate(fam: &Family, ctx: &GridCtx, spec: &KernelSpec, dir: Direction, r: &Region, tripled: bool) -> Result<f64> {
    let t = &ctx.tree;
    let n = fam.n;
    let (src, dst) = match dir {
        Direction::Forward => (SIGMA, OMEGA),
        Direction::Dual => (OMEGA, SIGMA),
    };
    let inp = r.atoms(t, src);
    let mass: f64 = inp.iter().map(|&j| t.masses[src][j]).sum();
    if mass <= 0.0 {
        return Ok(0.0);
    }
    let outs: Vec<usize> = if tripled {
        (0..t.points[dst].len()).filter(|&i| region_dilate_contains(ctx, r, 3.0, &t.coords[dst][i])).collect()
    } else {
        r.atoms(t, dst)
    };
    let mut total = 0.0;
    for &i in &outs {
        let mut acc = vec![0.0; spec.components(n)];
        for &j in &inp {
            // The dual operator has kernel K(x, y) = K(y − x) with y on ω.
            let w = match dir {
                Direction::Forward => diff(&t.points[dst][i], &t.points[src][j]),
                Direction::Dual => diff(&t.points[src][j], &t.points[dst][i]),
            };
            for (a, k) in acc.iter_mut().zip(spec.eval(n, &w)?) {
                *a += k * t.masses[src][j];
            }
        }
        total += t.masses[dst][i] * acc.iter().map(|a| a * a).sum::<f64>();
    }
    Ok(total / mass)
}

/// `𝔗` (forward) or `𝔗*` (dual), optionally tripled, as a square root of the
/// sup over the enumerated family.
pub fn testing_constant(fam: &Family, spec: &KernelSpec, dir: Direction, tripled: bool) -> Result<ConstantWitness> {
    let per: Vec<Result<(f64, Witness)>> = fam
        .grids
        .par_iter()
        .enumerate()
        .map(|(g, ctx)| {
            let mut c = Vec::new();
            for r in regions(ctx) {
                let v = testing_candidate(fam, ctx, spec, dir, &r, tripled)?;
                c.push((v, Witness::Region { grid: g, region: r }));
            }
            Ok(best(c))
        })
        .collect();
    let (v, w) = best(per.into_iter().collect::<Result<Vec<_>>>()?);
    let name = format!("testing{}_{}", if tripled { "_tripled" } else { "" }, dir.label());
    Ok(ConstantWitness::finite(name, v.sqrt(), w, family_label(fam)))
}

pub fn testing_at(fam: &Family, spec: &KernelSpec, dir: Direction, tripled: bool, g: usize, r: &Region) -> Result<f64> {
    Ok(testing_candidate(fam, &fam.grids[g], spec, dir, r, tripled)?.sqrt())
}

/// `|∫_Q T(1_{Q′}σ) dω| / √(|Q|_ω |Q′|_σ)`.
pub fn wbp_pair(fam: &Family, spec: &KernelSpec, g: usize, q: &crate::geometry::Cube, qp: &crate::geometry::Cube) -> Result<f64> {
    let t = &fam.grids[g].tree;
    let n = fam.n;
    let (Some(a), Some(b)) = (t.node(q), t.node(qp)) else { return Ok(0.0) };
    let (mw, ms) = (t.nodes[a].mass[OMEGA], t.nodes[b].mass[SIGMA]);
    if mw <= 0.0 || ms <= 0.0 {
        return Ok(0.0);
    }
    let mut acc = vec![0.0; spec.components(n)];
    for &i in &t.nodes[a].atoms[OMEGA] {
        for &j in &t.nodes[b].atoms[SIGMA] {
            let k = spec.eval(n, &diff(&t.points[OMEGA][i], &t.points[SIGMA][j]))?;
            for (x, v) in acc.iter_mut().zip(k) {
                *x += v * t.masses[OMEGA][i] * t.masses[SIGMA][j];
            }
        }
    }
    Ok(acc.iter().map(|x| x * x).sum::<f64>().sqrt() / (mw * ms).sqrt())
}

fn in_triple_annulus(q: &crate::geometry::Cube, qp: &crate::geometry::Cube, n: usize) -> bool {
    if q.contains(qp) || qp.contains(q) {
        return false;
    }
    let lo = q.lower(n);
    let c = qp.center_u(n);
    let h = 1.5 * qp.side();
    (0..n).all(|d| lo[d] >= c[d] - h - 1e-12 * h && lo[d] + q.side() <= c[d] + h + 1e-12 * h)
}

/// The weak boundedness constant over pairs of occupied cubes with side
/// ratio in `[1/C, C]` and one inside the triple of the other, minus it.
pub fn wbp_constant(fam: &Family, spec: &KernelSpec, c_comp: f64) -> Result<ConstantWitness> {
    if !(c_comp >= 1.0) {
        return Err(param("c_comp", "must be at least 1"));
    }
    let span = c_comp.log2().floor() as i32;
    let per: Vec<Result<(f64, Witness)>> = fam
        .grids
        .par_iter()
        .enumerate()
        .map(|(g, ctx)| {
            let t = &ctx.tree;
            let n = t.n();
            let mut c = Vec::new();
            for (&lq, qs) in &t.by_level {
                for dl in -span..=span {
                    let Some(ps) = t.by_level.get(&(lq + dl)) else { continue };
                    for &a in qs {
                        if t.nodes[a].mass[OMEGA] <= 0.0 {
                            continue;
                        }
                        for &b in ps {
                            if t.nodes[b].mass[SIGMA] <= 0.0 {
                                continue;
                            }
                            let (q, qp) = (t.nodes[a].cube, t.nodes[b].cube);
                            if in_triple_annulus(&q, &qp, n) || in_triple_annulus(&qp, &q, n) {
                                let v = wbp_pair(fam, spec, g, &q, &qp)?;
                                c.push((v, Witness::Pair { grid: g, first: q, second: qp }));
                            }
                        }
                    }
                }
            }
            Ok(best(c))
        })
        .collect();
    let (v, w) = best(per.into_iter().collect::<Result<Vec<_>>>()?);
    Ok(ConstantWitness::finite("wbp", v, w, family_label(fam)))
}

/// `T μ` at the ω-atoms selected by `keep`, per component; zero elsewhere.
fn apply(fam: &Family, spec: &KernelSpec, mu: &AtomicMeasure, keep: impl Fn(usize) -> bool) -> Result<Vec<Vec<f64>>> {
    let n = fam.n;
    let c = spec.components(n);
    let mut out = vec![vec![0.0; fam.omega.len()]; c];
    for (i, y) in fam.omega.points.iter().enumerate().filter(|(i, _)| keep(*i)) {
        for (z, m) in mu.points.iter().zip(&mu.masses) {
            for (l, k) in spec.eval(n, &diff(y, z))?.into_iter().enumerate() {
                out[l][i] += k * m;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonoRatio {
    pub lhs: f64,
    pub phi: f64,
    pub ratio: f64,
}

/// `‖Δ_J^ω T μ‖` against `Φ` for node `j` of grid `g`, with `μ` supported
/// outside `2J`.
pub fn mono_ratio(fam: &Family, g: usize, j: usize, mu: &AtomicMeasure, spec: &KernelSpec) -> Result<MonoRatio> {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    let n = fam.n;
    let jc = t.nodes[j].cube;
    for z in &mu.points {
        if t.grid.in_dilate(&jc, 2.0, &t.grid.coords(z)) {
            return Err(Error::Hypothesis(format!("μ has an atom at {:?} inside 2J", &z[..n])));
        }
    }
    let tmu = apply(fam, spec, mu, |i| t.in_cube(&jc, OMEGA, i))?;
    let m = &t.masses[OMEGA];
    let lhs2: f64 = tmu
        .iter()
        .map(|f| {
            let d = ctx.haar[OMEGA].delta_at_atoms(t, j, f);
            d.iter().zip(m).map(|(x, w)| w * x * x).sum::<f64>()
        })
        .sum();
    let c = t.grid.center(&jc);
    let l = jc.side();
    let atoms = || mu.points.iter().zip(mu.masses.iter().copied());
    let p1 = poisson_m(n, spec.alpha, 1.0, l, &c, atoms()) / l;
    let p2 = poisson_m(n, spec.alpha, 1.0 + spec.delta_smooth, l, &c, atoms()) / l;
    let phi2 = p1 * p1 * ctx.haar[OMEGA].x_energy[j] + p2 * p2 * variance(t, OMEGA, &t.nodes[j].atoms[OMEGA]);
    let (lhs, phi) = (lhs2.sqrt(), phi2.sqrt());
    Ok(MonoRatio { lhs, phi, ratio: if phi > 0.0 { lhs / phi } else { 0.0 } })
}

/// `Σ_Q Σ_k c_{Q,k} h_{Q,k}` at the ω-atoms.
pub fn haar_combination(ctx: &GridCtx, coeffs: &[(usize, Vec<f64>)]) -> Vec<f64> {
    let t = &ctx.tree;
    let mut out = vec![0.0; t.points[OMEGA].len()];
    for (q, cs) in coeffs {
        for (h, c) in ctx.haar[OMEGA].functions(t, *q).iter().zip(cs) {
            for (o, v) in out.iter_mut().zip(h) {
                *o += c * v;
            }
        }
    }
    out
}

/// `|⟨T ν, Ψ⟩_ω| / (‖Ψ‖ P^α(J, ν) √|J|_ω)` for node `j` of grid `g`.
pub fn pivotal_ratio(fam: &Family, g: usize, j: usize, psi: &[f64], nu: &AtomicMeasure, spec: &KernelSpec) -> Result<f64> {
    let ctx = &fam.grids[g];
    let t = &ctx.tree;
    let n = fam.n;
    let jc = t.nodes[j].cube;
    let m = &t.masses[OMEGA];
    let scale = psi.iter().zip(m).map(|(p, w)| (p * w).abs()).sum::<f64>();
    for (i, &p) in psi.iter().enumerate() {
        if p != 0.0 && !t.in_cube(&jc, OMEGA, i) {
            return Err(Error::Hypothesis("Ψ is not supported in J".into()));
        }
    }
    let mean: f64 = psi.iter().zip(m).map(|(p, w)| p * w).sum();
    if mean.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::Hypothesis(format!("Ψ has ω-mean {mean}")));
    }
    if nu.masses.iter().any(|&x| x < 0.0) {
        return Err(Error::Hypothesis("ν must be positive".into()));
    }
    for z in &nu.points {
        if t.grid.in_dilate(&jc, fam.params.gamma, &t.grid.coords(z)) {
            return Err(Error::Hypothesis(format!("ν has an atom at {:?} inside γJ", &z[..n])));
        }
    }
    let norm = psi.iter().zip(m).map(|(p, w)| w * p * p).sum::<f64>().sqrt();
    let pj = poisson_m(n, spec.alpha, 1.0, jc.side(), &t.grid.center(&jc), nu.points.iter().zip(nu.masses.iter().copied()));
    let den = norm * pj * t.nodes[j].mass[OMEGA].sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    let tnu = apply(fam, spec, nu, |i| psi[i] != 0.0)?;
    let num = tnu
        .iter()
        .map(|f| f.iter().zip(psi).zip(m).map(|((a, b), w)| a * b * w).sum::<f64>().powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::GridOptions;
    use crate::geometry::{GoodnessParams, QuasiMap};
    use crate::measures::{generate, Generator, MassLaw};
    use proptest::{prop_assert, proptest};

    fn m1(points: &[f64], masses: &[f64]) -> AtomicMeasure {
        AtomicMeasure::new(1, points.iter().map(|&x| [x, 0.0, 0.0]).collect(), masses.to_vec()).unwrap()
    }

    fn tangent(delta: f64, r_max: f64) -> KernelSpec {
        KernelSpec::riesz(0.0, 0, Truncation::Tangent { delta, r_max })
    }

    #[test]
    fn kernel_examples() {
        let k = tangent(0.5, 2.0);
        assert_eq!(k.eval(1, &[1.0, 0.0, 0.0]).unwrap(), vec![1.0]);
        assert_eq!(k.eval(1, &[-1.0, 0.0, 0.0]).unwrap(), vec![-1.0]);
        assert!((k.eval(1, &[0.25, 0.0, 0.0]).unwrap()[0] - 3.0).abs() < 1e-15);
        assert!((k.eval(1, &[-0.25, 0.0, 0.0]).unwrap()[0] + 3.0).abs() < 1e-15);
        assert_eq!(k.eval(1, &[0.0; 3]).unwrap(), vec![0.0]);
        assert!(matches!(k.untruncated().eval(1, &[0.0; 3]), Err(Error::Singular)));
        assert_eq!(tangent_zero(1, 0.0, 2.0), 4.0);
        assert_eq!(k.psi(1, 4.0), 0.0);
        assert_eq!(k.psi(1, 5.0), 0.0);
        assert!((k.psi(1, 3.0) - 0.25).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn tangent_profile_is_c1_and_dominated(n in 1usize..=3, alpha in 0.0f64..0.99, delta in 0.05f64..1.0, ratio in 1.5f64..8.0, r in 1e-3f64..20.0) {
            let alpha = alpha * n as f64;
            let spec = KernelSpec { alpha, ..KernelSpec::riesz(0.0, 0, Truncation::Tangent { delta, r_max: delta * ratio }) };
            let s = n as f64 - alpha;
            let p = spec.psi(n, r);
            prop_assert!(p >= 0.0 && p <= r.powf(-s) * (1.0 + 1e-12));
            for knot in [delta, delta * ratio] {
                let h = 1e-7 * knot;
                let left = (spec.psi(n, knot) - spec.psi(n, knot - h)) / h;
                let right = (spec.psi(n, knot + h) - spec.psi(n, knot)) / h;
                prop_assert!((left - right).abs() <= 1e-4 * left.abs().max(1.0));
            }
        }
    }

    #[test]
    fn norm_examples() {
        let spec = tangent(0.5, 2.0);
        let s = m1(&[0.0], &[4.0]);
        let w = m1(&[1.0], &[1.0]);
        let r = op_norm(&s, &w, &spec, 1e-10).unwrap();
        assert_eq!((r.norm, r.method), (2.0, NormMethod::Closed));
        assert_eq!(op_norm(&AtomicMeasure::empty(1), &w, &spec, 1e-10).unwrap().norm, 0.0);
        assert_eq!(op_norm(&s, &AtomicMeasure::empty(1), &spec, 1e-10).unwrap().norm, 0.0);
    }

    #[test]
    fn power_iteration_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let (r, c) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
            let m = DMatrix::from_fn(r, c, |_, _| rng.gen::<f64>() - 0.5);
            let (p, _) = power_iteration(&m, 1e-13, 100_000).unwrap();
            let d = svd_norm(&m);
            assert!((p - d).abs() <= 1e-8 * d, "{p} vs {d}");
        }
    }

    #[test]
    fn transpose_duality() {
        let gen = Generator::UniformBox { count: 12, mass_law: MassLaw::LogUniform { lo: 0.1, hi: 10.0 }, scale: 1.0 };
        for seed in 0..5 {
            let (s, w) = generate(seed, 2, &gen);
            let (d, r) = default_bounds(&s, &w);
            let spec = KernelSpec::riesz(0.5, 1, Truncation::Tangent { delta: d, r_max: r });
            let a = op_norm(&s, &w, &spec, 1e-12).unwrap().norm;
            // K(w)ᵀ on swapped measures: K*(x − y) = K(y − x) = −K(x − y) for odd kernels.
            let b = op_norm(&w, &s, &spec, 1e-12).unwrap().norm;
            assert!((a - b).abs() <= 1e-10 * a);
        }
    }

    fn family(seed: u64, common: bool) -> Family {
        let gen = if common {
            Generator::PairWithCommon { count: 8, mass_law: MassLaw::Uniform { lo: 0.5, hi: 2.0 }, scale: 1.0, common_fraction: 0.3 }
        } else {
            Generator::UniformBox { count: 8, mass_law: MassLaw::Uniform { lo: 0.5, hi: 2.0 }, scale: 1.0 }
        };
        let (s, w) = generate(seed, 1, &gen);
        let opts = GridOptions { shifts: 2, max_depth: 12, seed };
        Family::new(s, w, 0.0, GoodnessParams::defaults(1, 0.0), QuasiMap::Identity, &opts).unwrap()
    }

    #[test]
    fn testing_and_wbp_are_below_the_norm() {
        for seed in 0..6 {
            let fam = family(seed, seed % 2 == 1);
            let (d, r) = default_bounds(&fam.sigma, &fam.omega);
            let spec = tangent(d, r);
            let nn = op_norm(&fam.sigma, &fam.omega, &spec, 1e-12).unwrap().norm;
            let slack = nn * (1.0 + 1e-9);
            for dir in [Direction::Forward, Direction::Dual] {
                let plain = testing_constant(&fam, &spec, dir, false).unwrap();
                let tripled = testing_constant(&fam, &spec, dir, true).unwrap();
                assert!(plain.value <= slack && tripled.value <= slack);
                assert!(plain.value <= tripled.value * (1.0 + 1e-12));
                if let Witness::Region { grid, region } = &plain.witness {
                    assert_eq!(testing_at(&fam, &spec, dir, false, *grid, region).unwrap(), plain.value);
                }
            }
            let wbp = wbp_constant(&fam, &spec, 2.0).unwrap();
            assert!(wbp.value <= slack);
        }
    }

    #[test]
    fn testing_single_atoms_closed_form() {
        let s = m1(&[0.2], &[3.0]);
        let w = m1(&[0.7], &[2.0]);
        let fam = Family::new(s, w, 0.0, GoodnessParams::defaults(1, 0.0), QuasiMap::Identity, &GridOptions { shifts: 0, ..Default::default() }).unwrap();
        let spec = tangent(0.25, 2.0);
        // Over any cube holding both atoms: (1/3)·2·(3·K(0.5))² = 2·3·4 = 24.
        let v = testing_constant(&fam, &spec, Direction::Forward, false).unwrap().value;
        assert!((v - 24f64.sqrt()).abs() < 1e-12);
        let nn = op_norm(&fam.sigma, &fam.omega, &spec, 1e-12).unwrap().norm;
        assert!((nn - v).abs() < 1e-12);
    }

    #[test]
    fn wbp_far_apart_is_small() {
        let s = m1(&[0.0], &[1.0]);
        let w = m1(&[1.0], &[1.0]);
        let fam = Family::new(s, w, 0.0, GoodnessParams::defaults(1, 0.0), QuasiMap::Identity, &GridOptions { shifts: 0, ..Default::default() }).unwrap();
        let v = wbp_constant(&fam, &tangent(0.25, 4.0), 2.0).unwrap();
        assert!(v.value <= 1.0 + 1e-12);
        assert!(wbp_constant(&fam, &tangent(0.25, 4.0), 0.5).is_err());
    }

    fn one_dim_family(seed: u64, scale: f64) -> Family {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wp: Vec<f64> = (0..6).map(|_| 0.3 + 0.1 * rng.gen::<f64>()).collect();
        let wm: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..2.0)).collect();
        let s = m1(&[0.05 * scale], &[1.0]);
        let w = m1(&wp.iter().map(|x| x * scale).collect::<Vec<_>>(), &wm);
        let opts = GridOptions { shifts: 0, max_depth: 12, seed: 0 };
        let p = GoodnessParams { r: 2, eps: 0.5, tau: 3, rho: 6, gamma: 2.0 };
        Family::new(s, w, 0.0, p, QuasiMap::Identity, &opts).unwrap()
    }

    #[test]
    fn mono_and_pivotal_edge_cases_and_homogeneity() {
        let spec = KernelSpec::riesz(0.0, 0, Truncation::None);
        let f1 = one_dim_family(1, 1.0);
        let f2 = one_dim_family(1, 2.0);
        let t1 = &f1.grids[0].tree;
        // A cube with at least two ω-children far from the μ atom.
        let far = m1(&[2.0], &[1.5]);
        let far2 = m1(&[4.0], &[1.5]);
        let mut checked = 0;
        for j in 0..t1.nodes.len() {
            let nd = &t1.nodes[j];
            if f1.grids[0].haar[OMEGA].x_energy[j] <= 0.0 {
                continue;
            }
            let c2 = crate::geometry::Cube::new(nd.cube.level - 1, nd.cube.idx);
            let j2 = f2.grids[0].tree.node(&c2).expect("doubled grid mirrors the original");
            let (Ok(a), Ok(b)) = (mono_ratio(&f1, 0, j, &far, &spec), mono_ratio(&f2, 0, j2, &far2, &spec)) else { continue };
            assert!(a.ratio > 0.0);
            assert!((a.ratio - b.ratio).abs() <= 1e-12 * a.ratio, "{a:?} {b:?}");
            let h = f1.grids[0].haar[OMEGA].functions(t1, j);
            let psi = h[0].clone();
            let p1 = pivotal_ratio(&f1, 0, j, &psi, &far, &spec).unwrap();
            let psi2 = f2.grids[0].haar[OMEGA].functions(&f2.grids[0].tree, j2)[0].clone();
            let p2 = pivotal_ratio(&f2, 0, j2, &psi2, &far2, &spec).unwrap();
            assert!((p1 - p2).abs() <= 1e-12 * p1);
            assert_eq!(pivotal_ratio(&f1, 0, j, &psi, &AtomicMeasure::empty(1), &spec).unwrap(), 0.0);
            // A single Haar function: the numerator is |⟨Tν, h⟩|.
            let tnu = apply(&f1, &spec, &far, |_| true).unwrap();
            let coef: f64 = tnu[0].iter().zip(&psi).zip(&t1.masses[OMEGA]).map(|((a, b), w)| a * b * w).sum();
            let pj = poisson_m(1, 0.0, 1.0, nd.cube.side(), &t1.grid.center(&nd.cube), [(&far.points[0], 1.5)]);
            assert!((p1 * pj * nd.mass[OMEGA].sqrt() - coef.abs()).abs() <= 1e-12 * coef.abs().max(1e-300));
            checked += 1;
        }
        assert!(checked > 0);
        let root = t1.roots[0];
        let e = mono_ratio(&f1, 0, root, &AtomicMeasure::empty(1), &spec).unwrap();
        assert_eq!((e.lhs, e.phi, e.ratio), (0.0, 0.0, 0.0));
        let inside = m1(&[0.35], &[1.0]);
        assert!(matches!(mono_ratio(&f1, 0, root, &inside, &spec), Err(Error::Hypothesis(_))));
    }

    #[test]
    fn single_omega_atom_has_no_mono_lhs() {
        let spec = KernelSpec::riesz(0.0, 0, Truncation::None);
        let fam = Family::new(m1(&[0.0], &[1.0]), m1(&[0.9], &[1.0]), 0.0, GoodnessParams::defaults(1, 0.0), QuasiMap::Identity, &GridOptions::default()).unwrap();
        let t = &fam.grids[0].tree;
        for j in 0..t.nodes.len() {
            if let Ok(r) = mono_ratio(&fam, 0, j, &m1(&[5.0], &[1.0]), &spec) {
                assert_eq!((r.lhs, r.ratio), (0.0, 0.0));
            }
        }
    }
}
