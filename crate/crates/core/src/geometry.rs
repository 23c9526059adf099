//! Dyadic grids, quasicubes, deep embedding and goodness.
//!
//! Cubes live in grid coordinates `u = Ω⁻¹(p) − shift`. A cube at level `k`
//! with index `i` is the half-open box `[i·2^-k, (i+1)·2^-k)`. Membership is
//! decided by `floor(u·2^k) == i`, which is exact for finite `u` and nests
//! consistently across levels.

use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};

pub const MAX_DIM: usize = 3;
pub type Point = [f64; MAX_DIM];
pub type Index = [i64; MAX_DIM];

pub fn pow2(k: i32) -> f64 {
    (2.0f64).powi(k)
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    let mut s = 0.0;
    for d in 0..MAX_DIM {
        let t = a[d] - b[d];
        s += t * t;
    }
    s.sqrt()
}

pub fn point_from_slice(v: &[f64]) -> Point {
    let mut p = [0.0; MAX_DIM];
    p[..v.len()].copy_from_slice(v);
    p
}

/// Grid index of `u` at `level`.
pub fn index_at(u: &Point, level: i32, n: usize) -> Index {
    let s = pow2(level);
    let mut idx = [0i64; MAX_DIM];
    for d in 0..n {
        idx[d] = (u[d] * s).floor() as i64;
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cube {
    pub level: i32,
    pub idx: Index,
}

impl Cube {
    pub fn new(level: i32, idx: Index) -> Self {
        Cube { level, idx }
    }

    pub fn side(&self) -> f64 {
        pow2(-self.level)
    }

    pub fn ancestor(&self, level: i32) -> Cube {
        debug_assert!(level <= self.level);
        let sh = (self.level - level) as u32;
        let mut idx = self.idx;
        for v in idx.iter_mut() {
            *v >>= sh;
        }
        Cube { level, idx }
    }

    pub fn parent(&self) -> Cube {
        self.ancestor(self.level - 1)
    }

    /// The `2^n` children in lexicographic index order.
    pub fn children(&self, n: usize) -> Vec<Cube> {
        (0..1usize << n)
            .map(|mask| {
                let mut idx = [0i64; MAX_DIM];
                for d in 0..n {
                    idx[d] = 2 * self.idx[d] + ((mask >> (n - 1 - d)) & 1) as i64;
                }
                Cube { level: self.level + 1, idx }
            })
            .collect()
    }

    pub fn contains(&self, other: &Cube) -> bool {
        other.level >= self.level && other.ancestor(self.level).idx == self.idx
    }

    pub fn contains_u(&self, u: &Point, n: usize) -> bool {
        index_at(u, self.level, n)[..n] == self.idx[..n]
    }

    pub fn lower(&self, n: usize) -> Point {
        let s = self.side();
        let mut p = [0.0; MAX_DIM];
        for d in 0..n {
            p[d] = self.idx[d] as f64 * s;
        }
        p
    }

    pub fn center_u(&self, n: usize) -> Point {
        let s = self.side();
        let mut p = [0.0; MAX_DIM];
        for d in 0..n {
            p[d] = (self.idx[d] as f64 + 0.5) * s;
        }
        p
    }

    pub fn as_alt(&self) -> AltCube {
        let mut half = self.idx;
        for v in half.iter_mut() {
            *v *= 2;
        }
        AltCube { level: self.level, half }
    }

    /// Neighbours: same level, disjoint, each inside the other's triple.
    pub fn neighbours(&self, n: usize) -> Vec<Cube> {
        let total = 3usize.pow(n as u32);
        let mut out = Vec::with_capacity(total - 1);
        for code in 0..total {
            let mut c = code;
            let mut idx = self.idx;
            let mut zero = true;
            for d in (0..n).rev() {
                let off = (c % 3) as i64 - 1;
                c /= 3;
                if off != 0 {
                    zero = false;
                }
                idx[d] += off;
            }
            if !zero {
                out.push(Cube { level: self.level, idx });
            }
        }
        out
    }
}

/// A union of `2^n` grid cubes of side `½ℓ`, with lower corner at
/// `half·2^-(level+1)` and side `2^-level`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AltCube {
    pub level: i32,
    pub half: Index,
}

impl AltCube {
    pub fn side(&self) -> f64 {
        pow2(-self.level)
    }

    pub fn pieces(&self, n: usize) -> Vec<Cube> {
        (0..1usize << n)
            .map(|mask| {
                let mut idx = [0i64; MAX_DIM];
                for d in 0..n {
                    idx[d] = self.half[d] + ((mask >> (n - 1 - d)) & 1) as i64;
                }
                Cube { level: self.level + 1, idx }
            })
            .collect()
    }

    pub fn is_dyadic(&self, n: usize) -> bool {
        self.half[..n].iter().all(|h| h % 2 == 0)
    }

    /// The `2^n` alternate cubes of twice the side that contain `c`.
    pub fn containing(c: &Cube, n: usize) -> Vec<AltCube> {
        (0..1usize << n)
            .map(|mask| {
                let mut half = [0i64; MAX_DIM];
                for d in 0..n {
                    half[d] = c.idx[d] - ((mask >> (n - 1 - d)) & 1) as i64;
                }
                AltCube { level: c.level - 1, half }
            })
            .collect()
    }

    pub fn contains_u(&self, u: &Point, n: usize) -> bool {
        let s = pow2(self.level + 1);
        (0..n).all(|d| {
            let k = (u[d] * s).floor() as i64;
            k >= self.half[d] && k < self.half[d] + 2
        })
    }

    pub fn contains_cube(&self, j: &Cube, n: usize) -> bool {
        if j.level < self.level + 1 {
            return false;
        }
        let a = j.ancestor(self.level + 1);
        (0..n).all(|d| a.idx[d] >= self.half[d] && a.idx[d] < self.half[d] + 2)
    }

    pub fn lower(&self, n: usize) -> Point {
        let s = pow2(-(self.level + 1));
        let mut p = [0.0; MAX_DIM];
        for d in 0..n {
            p[d] = self.half[d] as f64 * s;
        }
        p
    }

    pub fn center_u(&self, n: usize) -> Point {
        let s = pow2(-(self.level + 1));
        let mut p = [0.0; MAX_DIM];
        for d in 0..n {
            p[d] = (self.half[d] as f64 + 1.0) * s;
        }
        p
    }

    /// Smallest gap between `j ⊂ self` and the boundary, in grid units.
    pub fn boundary_gap(&self, j: &Cube, n: usize) -> f64 {
        let sh = j.level - (self.level + 1);
        let mut g = i64::MAX;
        for d in 0..n {
            let klo = self.half[d] << sh;
            let khi = klo + (2i64 << sh);
            g = g.min(j.idx[d] - klo).min(khi - j.idx[d] - 1);
        }
        g as f64 * pow2(-j.level)
    }
}

/// Relative tolerance on the deep-embedding gap comparison.
pub const DEEP_TOL: f64 = 1e-12;

/// `J ⋐_{r,ε} K`: containment, scale separation by `r` levels and a boundary
/// gap of at least `½ ℓ(J)^ε ℓ(K)^{1−ε}`.
pub fn deeply_embedded(j: &Cube, k: &AltCube, r: u32, eps: f64, n: usize) -> bool {
    if j.level < k.level + r as i32 || !k.contains_cube(j, n) {
        return false;
    }
    let need = 0.5 * pow2(-j.level).powf(eps) * pow2(-k.level).powf(1.0 - eps);
    k.boundary_gap(j, n) >= need * (1.0 - DEEP_TOL)
}

/// `J` is `r`-nearby in `K`: `J ⊂ K` and `ℓ(J) > 2^-r ℓ(K)`.
pub fn nearby(j: &Cube, k: &Cube, r: u32) -> bool {
    k.contains(j) && j.level < k.level + r as i32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuasiMap {
    Identity,
    /// `x_{k+1} += a_k sin(f_k x_1)` for `k < n − 1`.
    Shear {
        amplitude: Vec<f64>,
        frequency: Vec<f64>,
    },
    /// Rotation by angle `2ε ln|x|` about the origin; `n = 2` only.
    LogSpiral { eps: f64 },
}

impl QuasiMap {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            QuasiMap::Identity => Ok(()),
            QuasiMap::Shear { amplitude, frequency } => {
                if amplitude.len() != frequency.len() || amplitude.len() + 1 > n.max(1) {
                    return Err(param("map", "shear needs at most n−1 amplitude/frequency pairs"));
                }
                if amplitude.iter().chain(frequency).any(|v| !v.is_finite()) {
                    return Err(param("map", "shear coefficients must be finite"));
                }
                Ok(())
            }
            QuasiMap::LogSpiral { eps } => {
                if n != 2 {
                    return Err(param("map", "log_spiral requires n = 2"));
                }
                if !eps.is_finite() {
                    return Err(param("map", "eps must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, QuasiMap::Identity)
    }

    pub fn forward(&self, x: &Point) -> Point {
        match self {
            QuasiMap::Identity => *x,
            QuasiMap::Shear { amplitude, frequency } => {
                let mut y = *x;
                for (k, (a, f)) in amplitude.iter().zip(frequency).enumerate() {
                    y[k + 1] += a * (f * x[0]).sin();
                }
                y
            }
            QuasiMap::LogSpiral { eps } => rotate_log(x, 2.0 * eps),
        }
    }

    pub fn inverse(&self, y: &Point) -> Point {
        match self {
            QuasiMap::Identity => *y,
            QuasiMap::Shear { amplitude, frequency } => {
                let mut x = *y;
                for (k, (a, f)) in amplitude.iter().zip(frequency).enumerate() {
                    x[k + 1] -= a * (f * y[0]).sin();
                }
                x
            }
            QuasiMap::LogSpiral { eps } => rotate_log(y, -2.0 * eps),
        }
    }

    /// Upper bound for the Lipschitz constants of the map and its inverse.
    pub fn lipschitz(&self) -> f64 {
        match self {
            QuasiMap::Identity => 1.0,
            QuasiMap::Shear { amplitude, frequency } => {
                let s: f64 = amplitude.iter().zip(frequency).map(|(a, f)| (a * f).powi(2)).sum();
                1.0 + s.sqrt()
            }
            QuasiMap::LogSpiral { eps } => 1.0 + 2.0 * eps.abs(),
        }
    }
}

fn rotate_log(x: &Point, c: f64) -> Point {
    let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
    if r == 0.0 {
        return *x;
    }
    let th = c * r.ln();
    let (s, co) = th.sin_cos();
    [co * x[0] - s * x[1], s * x[0] + co * x[1], x[2]]
}

/// Euclidean distance between preimages of two point sets.
pub fn qdist(a: &[Point], b: &[Point], map: &QuasiMap) -> f64 {
    let pa: Vec<Point> = a.iter().map(|p| map.inverse(p)).collect();
    let pb: Vec<Point> = b.iter().map(|p| map.inverse(p)).collect();
    let mut best = f64::INFINITY;
    for x in &pa {
        for y in &pb {
            best = best.min(dist(x, y));
        }
    }
    best
}

/// Distance between two closed cubes of one grid, in preimage coordinates.
pub fn qdist_cubes(a: &Cube, b: &Cube, n: usize) -> f64 {
    let u = a.level.max(b.level);
    let (sa, sb) = ((u - a.level) as u32, (u - b.level) as u32);
    let mut s = 0.0;
    for d in 0..n {
        let (alo, ahi) = (a.idx[d] << sa, (a.idx[d] + 1) << sa);
        let (blo, bhi) = (b.idx[d] << sb, (b.idx[d] + 1) << sb);
        let gap = (blo - ahi).max(alo - bhi).max(0) as f64 * pow2(-u);
        s += gap * gap;
    }
    s.sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoodnessParams {
    pub r: u32,
    pub eps: f64,
    pub tau: u32,
    pub rho: u32,
    pub gamma: f64,
}

impl GoodnessParams {
    pub fn defaults(n: usize, alpha: f64) -> Self {
        let r = 4;
        let tau = r + 1;
        GoodnessParams {
            r,
            eps: 1.0 / (2.0 * (n as f64 + 1.0 - alpha)),
            tau,
            rho: r + tau + 1,
            gamma: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(param("r", "must be positive"));
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(param("eps", "must lie in (0,1)"));
        }
        if self.tau <= self.r {
            return Err(param("tau", "must exceed r"));
        }
        if self.rho <= self.r + self.tau {
            return Err(param("rho", "must exceed r + tau"));
        }
        if !(self.gamma >= 2.0) {
            return Err(param("gamma", "must be at least 2"));
        }
        Ok(())
    }

    /// `γJ ⊂ K` is guaranteed for deeply embedded `J` when this holds.
    pub fn gamma_contained(&self) -> bool {
        self.gamma <= (self.r as f64 * (1.0 - self.eps)).exp2()
    }
}

/// `δ = (rε − 1)/(r + τ)`.
pub fn better_good_delta(p: &GoodnessParams) -> f64 {
    (p.r as f64 * p.eps - 1.0) / (p.r + p.tau) as f64
}

/// Bounded-overlap constant for `{γJ : J ∈ M_deep(K)}` with `C_n = √n + 1`
/// and `C′ = 2^n`.
pub fn overlap_beta(n: usize, p: &GoodnessParams) -> f64 {
    let nf = n as f64;
    let cn = nf.sqrt() + 1.0;
    let cp = nf.exp2();
    let g = p.gamma.powf(nf);
    let a = (1.0 / (2.0 * p.gamma) + 2.0 * cn * (p.r as f64 * p.eps).exp2()).log2();
    let b = (4.0 * p.gamma).log2();
    (nf * p.r as f64 + 1.0).exp2() + cp * g * a / p.eps + cp * g * b / (1.0 - p.eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub n: usize,
    pub shift: Point,
    pub top: i32,
    pub bottom: i32,
    /// Inclusive range of top-level indices covering the data.
    pub lo: Index,
    pub hi: Index,
    pub map: QuasiMap,
}

impl Grid {
    /// Fits a grid to the preimages of `clouds`. The top level has side at
    /// least the bounding-box extent; the bottom level sits two levels below
    /// the first level at which every cloud's atoms are in distinct cubes.
    pub fn fit(n: usize, map: QuasiMap, shift: Point, clouds: &[&[Point]], max_depth: u32) -> Result<Grid> {
        if n == 0 || n > MAX_DIM {
            return Err(param("n", format!("must lie in 1..={MAX_DIM}")));
        }
        map.validate(n)?;
        let pre: Vec<Vec<Point>> = clouds
            .iter()
            .map(|c| {
                c.iter()
                    .map(|p| {
                        let mut u = map.inverse(p);
                        for d in 0..n {
                            u[d] -= shift[d];
                        }
                        u
                    })
                    .collect()
            })
            .collect();
        let mut lo_b = [f64::INFINITY; MAX_DIM];
        let mut hi_b = [f64::NEG_INFINITY; MAX_DIM];
        for u in pre.iter().flatten() {
            for d in 0..n {
                if !u[d].is_finite() {
                    return Err(Error::OutsideGrid { point: u[..n].to_vec() });
                }
                lo_b[d] = lo_b[d].min(u[d]);
                hi_b[d] = hi_b[d].max(u[d]);
            }
        }
        let empty = pre.iter().all(|c| c.is_empty());
        let extent = if empty { 0.0 } else { (0..n).map(|d| hi_b[d] - lo_b[d]).fold(0.0, f64::max) };
        let ext = if extent > 0.0 { extent } else { 1.0 };
        let top = -(ext.log2().ceil() as i32);
        let mut lo = [0i64; MAX_DIM];
        let mut hi = [0i64; MAX_DIM];
        if !empty {
            let s = pow2(top);
            for d in 0..n {
                lo[d] = (lo_b[d] * s).floor() as i64 - 1;
                hi[d] = (hi_b[d] * s).floor() as i64 + 1;
            }
        }
        let cap = top + max_depth as i32;
        let mut sep = top;
        'outer: while sep < cap {
            for c in &pre {
                let mut seen = std::collections::HashSet::with_capacity(c.len());
                for u in c {
                    if !seen.insert(index_at(u, sep, n)) {
                        sep += 1;
                        continue 'outer;
                    }
                }
            }
            break;
        }
        let bottom = (sep + 2).min(cap);
        Ok(Grid { n, shift, top, bottom, lo, hi, map })
    }

    /// Grid coordinates of a physical point.
    pub fn coords(&self, p: &Point) -> Point {
        let mut u = self.map.inverse(p);
        for d in 0..self.n {
            u[d] -= self.shift[d];
        }
        u
    }

    /// Physical point of grid coordinates.
    pub fn physical(&self, u: &Point) -> Point {
        let mut x = *u;
        for d in 0..self.n {
            x[d] += self.shift[d];
        }
        self.map.forward(&x)
    }

    pub fn center(&self, c: &Cube) -> Point {
        self.physical(&c.center_u(self.n))
    }

    pub fn alt_center(&self, k: &AltCube) -> Point {
        self.physical(&k.center_u(self.n))
    }

    pub fn in_extent(&self, u: &Point) -> bool {
        let t = index_at(u, self.top, self.n);
        (0..self.n).all(|d| t[d] >= self.lo[d] && t[d] <= self.hi[d])
    }

    pub fn containing_cube(&self, p: &Point, level: i32) -> Result<Cube> {
        if level < self.top || level > self.bottom {
            return Err(Error::LevelOutOfRange { level, top: self.top, bottom: self.bottom });
        }
        let u = self.coords(p);
        if !self.in_extent(&u) {
            return Err(Error::OutsideGrid { point: p[..self.n].to_vec() });
        }
        Ok(Cube::new(level, index_at(&u, level, self.n)))
    }

    /// `(r,ε)`-good relative to ancestors at or below the top level.
    pub fn is_good(&self, j: &Cube, r: u32, eps: f64) -> bool {
        let mut lvl = j.level - r as i32;
        while lvl >= self.top {
            if !deeply_embedded(j, &j.ancestor(lvl).as_alt(), r, eps, self.n) {
                return false;
            }
            lvl -= 1;
        }
        true
    }

    /// Good, with good children and good ancestors `π^ℓ J`, `0 ≤ ℓ ≤ τ`.
    pub fn is_tau_good(&self, j: &Cube, p: &GoodnessParams) -> bool {
        if !self.is_good(j, p.r, p.eps) {
            return false;
        }
        if !j.children(self.n).iter().all(|c| self.is_good(c, p.r, p.eps)) {
            return false;
        }
        (1..=p.tau as i32)
            .filter(|l| j.level - l >= self.top)
            .all(|l| self.is_good(&j.ancestor(j.level - l), p.r, p.eps))
    }

    /// Every cube of the truncated grid, top level first.
    pub fn all_cubes(&self) -> Vec<Cube> {
        let mut out = Vec::new();
        let mut idx = self.lo;
        loop {
            out.push(Cube::new(self.top, idx));
            let mut d = 0;
            while d < self.n {
                idx[d] += 1;
                if idx[d] <= self.hi[d] {
                    break;
                }
                idx[d] = self.lo[d];
                d += 1;
            }
            if d == self.n {
                break;
            }
        }
        let mut k = 0;
        while k < out.len() {
            if out[k].level < self.bottom {
                let kids = out[k].children(self.n);
                out.extend(kids);
            }
            k += 1;
        }
        out
    }

    /// Cubes good at `(r − 1, δ)` with `δ = (rε − 1)/(r + τ)` that fail to be
    /// τ-good at `(r, ε)`. Empty whenever `1/r < ε < 1 − 1/r`.
    pub fn better_good_counterexamples(&self, p: &GoodnessParams) -> Vec<Cube> {
        let delta = better_good_delta(p);
        self.all_cubes()
            .into_iter()
            .filter(|j| self.is_good(j, p.r - 1, delta) && !self.is_tau_good(j, p))
            .collect()
    }

    /// Maximal `J ⋐_{r,ε} K` down to the bottom level, descending only into
    /// cubes accepted by `keep`.
    pub fn m_deep_with(&self, k: &AltCube, r: u32, eps: f64, keep: &dyn Fn(&Cube) -> bool) -> Vec<Cube> {
        let mut out = Vec::new();
        let mut stack: Vec<Cube> = k.pieces(self.n).into_iter().rev().collect();
        while let Some(c) = stack.pop() {
            if c.level > self.bottom || !keep(&c) {
                continue;
            }
            if deeply_embedded(&c, k, r, eps, self.n) {
                out.push(c);
            } else {
                stack.extend(c.children(self.n).into_iter().rev());
            }
        }
        out.sort();
        out
    }

    pub fn m_deep(&self, k: &AltCube, r: u32, eps: f64) -> Vec<Cube> {
        self.m_deep_with(k, r, eps, &|_| true)
    }

    /// `M^ℓ(K)`: members of `M_deep(π^ℓ K′)` over the pieces `K′`, kept when
    /// deeply embedded in `K`.
    pub fn m_deep_shift_with(
        &self,
        k: &AltCube,
        ell: u32,
        r: u32,
        eps: f64,
        keep: &dyn Fn(&Cube) -> bool,
    ) -> Vec<Cube> {
        let mut seen = std::collections::BTreeSet::new();
        for piece in k.pieces(self.n) {
            let lvl = piece.level - ell as i32;
            if lvl < self.top {
                continue;
            }
            let a = piece.ancestor(lvl).as_alt();
            for j in self.m_deep_with(&a, r, eps, keep) {
                if deeply_embedded(&j, k, r, eps, self.n) {
                    seen.insert(j);
                }
            }
        }
        seen.into_iter().collect()
    }

    /// All alternate cubes at `level` containing some cube of `cubes`
    /// (which must sit at `level + 1`).
    pub fn alternate_cubes(&self, cubes: &[Cube], level: i32) -> Vec<AltCube> {
        let mut s = std::collections::BTreeSet::new();
        for c in cubes.iter().filter(|c| c.level == level + 1) {
            s.extend(AltCube::containing(c, self.n));
        }
        s.into_iter().collect()
    }

    pub fn neighbour_pairs(&self, cubes: &[Cube]) -> Vec<(Cube, Cube)> {
        let set: std::collections::BTreeSet<Cube> = cubes.iter().copied().collect();
        let mut out = Vec::new();
        for c in &set {
            for nb in c.neighbours(self.n) {
                if set.contains(&nb) {
                    out.push((*c, nb));
                }
            }
        }
        out
    }

    /// Grid-coordinate dilation `γJ` about the centre, half-open.
    pub fn in_dilate(&self, j: &Cube, gamma: f64, u: &Point) -> bool {
        let c = j.center_u(self.n);
        let h = 0.5 * gamma * j.side();
        (0..self.n).all(|d| u[d] >= c[d] - h && u[d] < c[d] + h)
    }

    pub fn dilate_inside(&self, j: &Cube, gamma: f64, k: &AltCube) -> bool {
        let c = j.center_u(self.n);
        let lo = k.lower(self.n);
        let h = 0.5 * gamma * j.side();
        (0..self.n).all(|d| c[d] - h >= lo[d] && c[d] + h <= lo[d] + k.side())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpperHalfPoint {
    pub x: Point,
    pub t: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TentMode {
    Full,
    TauDeep,
}

/// Membership of `p` in the tent over `k`, judged in grid coordinates.
pub fn tent_contains(grid: &Grid, k: &Cube, p: &UpperHalfPoint, mode: TentMode, tau: u32) -> bool {
    let l = k.side();
    if !(p.t > 0.0 && p.t <= l) {
        return false;
    }
    if mode == TentMode::TauDeep && p.t > pow2(-(tau as i32)) * l {
        return false;
    }
    let u = grid.coords(&p.x);
    let c = k.center_u(grid.n);
    let rad = 0.5 * (l - p.t) + 1e-12 * l;
    (0..grid.n).all(|d| (u[d] - c[d]).abs() <= rad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid1(top: i32, bottom: i32) -> Grid {
        Grid { n: 1, shift: [0.0; 3], top, bottom, lo: [-8, 0, 0], hi: [8, 0, 0], map: QuasiMap::Identity }
    }

    fn c1(level: i32, i: i64) -> Cube {
        Cube::new(level, [i, 0, 0])
    }

    #[test]
    fn containing_cube_half_open() {
        let g = grid1(0, 6);
        assert_eq!(g.containing_cube(&[0.3, 0.0, 0.0], 2).unwrap(), c1(2, 1));
        assert_eq!(g.containing_cube(&[0.5, 0.0, 0.0], 1).unwrap(), c1(1, 1));
        assert!(g.containing_cube(&[0.5, 0.0, 0.0], 9).is_err());
        assert!(g.containing_cube(&[100.0, 0.0, 0.0], 1).is_err());
    }

    #[test]
    fn containing_cube_two_dims_matches_enumeration() {
        let g = Grid { n: 2, shift: [0.0; 3], top: 0, bottom: 4, lo: [-1, -1, 0], hi: [1, 1, 0], map: QuasiMap::Identity };
        let p = [0.3, 0.7, 0.0];
        let found = g.containing_cube(&p, 2).unwrap();
        let mut hits = vec![];
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (i as f64 / 4.0, j as f64 / 4.0);
                if a <= p[0] && p[0] < a + 0.25 && b <= p[1] && p[1] < b + 0.25 {
                    hits.push(Cube::new(2, [i, j, 0]));
                }
            }
        }
        assert_eq!(hits, vec![found]);
        assert_eq!(found.lower(2), [0.25, 0.5, 0.0]);
    }

    #[test]
    fn neighbour_stencil() {
        let g = grid1(0, 3);
        let pairs = g.neighbour_pairs(&[c1(0, 0), c1(0, 1), c1(0, 2)]);
        assert!(pairs.contains(&(c1(0, 0), c1(0, 1))));
        assert!(!pairs.contains(&(c1(0, 0), c1(0, 2))));
        let q = Cube::new(0, [0, 0, 0]);
        let nb = q.neighbours(2);
        assert_eq!(nb.len(), 8);
        for k in &nb {
            // brute force: K ⊂ 3Q \ Q and Q ⊂ 3K \ K
            let d0 = (k.idx[0] - q.idx[0]).abs();
            let d1 = (k.idx[1] - q.idx[1]).abs();
            assert!(d0.max(d1) == 1);
        }
    }

    #[test]
    fn qdist_examples() {
        let a = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let b = [[2.0, 0.0, 0.0], [3.0, 0.0, 0.0]];
        assert_eq!(qdist(&a, &b, &QuasiMap::Identity), 1.0);
        assert_eq!(qdist_cubes(&c1(0, 0), &c1(0, 2), 1), 1.0);
        assert_eq!(qdist_cubes(&c1(0, 0), &c1(0, 1), 1), 0.0);
        let m = QuasiMap::LogSpiral { eps: 0.3 };
        let x = [[0.4, 0.2, 0.0]];
        let y = [[-0.7, 0.9, 0.0]];
        let (mx, my) = (m.forward(&x[0]), m.forward(&y[0]));
        let got = qdist(&[mx], &[my], &m);
        assert!((got - dist(&x[0], &y[0])).abs() < 1e-12);
    }

    #[test]
    fn deep_embedding_examples() {
        let k = c1(0, 0).as_alt();
        assert!(deeply_embedded(&c1(2, 1), &k, 2, 0.5, 1));
        assert!(!deeply_embedded(&c1(2, 0), &k, 2, 0.5, 1));
        assert!(!deeply_embedded(&c1(1, 0), &k, 2, 0.5, 1));
        // boundary gap 1/4 against ½·(1/4)^½ = 1/4
        assert_eq!(k.boundary_gap(&c1(2, 1), 1), 0.25);
    }

    #[test]
    fn m_deep_example() {
        let g = grid1(0, 8);
        let m = g.m_deep(&c1(0, 0).as_alt(), 2, 0.5);
        let at = |lvl: i32| m.iter().filter(|c| c.level == lvl).map(|c| c.idx[0]).collect::<Vec<_>>();
        assert_eq!(at(2), vec![1, 2]);
        assert!(at(4).contains(&2) && at(4).contains(&3));
        assert!(at(3).is_empty());
        for (a, b) in m.iter().zip(m.iter().skip(1)) {
            assert!(!a.contains(b) && !b.contains(a));
        }
        // oracle: exhaustive enumeration of all maximal deeply embedded cubes
        let mut oracle = vec![];
        for lvl in 0..=8 {
            for i in 0..(1i64 << lvl) {
                let c = c1(lvl, i);
                let k = c1(0, 0).as_alt();
                if deeply_embedded(&c, &k, 2, 0.5, 1) && !(c.level > 0 && deeply_embedded(&c.parent(), &k, 2, 0.5, 1)) {
                    oracle.push(c);
                }
            }
        }
        oracle.sort();
        assert_eq!(m, oracle);
    }

    #[test]
    fn alternate_cubes_count() {
        let c = c1(2, 3);
        assert_eq!(AltCube::containing(&c, 1).len(), 2);
        assert_eq!(AltCube::containing(&Cube::new(2, [1, 1, 0]), 2).len(), 4);
        let a = AltCube { level: 0, half: [1, 0, 0] };
        assert_eq!(a.pieces(1), vec![c1(1, 1), c1(1, 2)]);
        assert!(a.contains_u(&[0.5, 0.0, 0.0], 1) && !a.contains_u(&[1.5, 0.0, 0.0], 1));
        assert!(c1(0, 3).as_alt().is_dyadic(1));
    }

    #[test]
    fn tent_examples() {
        let g = grid1(0, 6);
        let k = c1(0, 0);
        let top = UpperHalfPoint { x: g.center(&k), t: 1.0 };
        assert!(tent_contains(&g, &k, &top, TentMode::Full, 2));
        assert!(!tent_contains(&g, &k, &top, TentMode::TauDeep, 1));
        for lvl in 0..4 {
            for i in -2..(2 << lvl) {
                let j = c1(lvl, i);
                let p = UpperHalfPoint { x: g.center(&j), t: j.side() };
                assert_eq!(tent_contains(&g, &k, &p, TentMode::Full, 2), k.contains(&j));
            }
        }
        // below the cone: oracle is the explicit convex hull in 1d
        let p = UpperHalfPoint { x: [0.9, 0.0, 0.0], t: 0.3 };
        let inside_hull = p.t <= 1.0 - 2.0 * (p.x[0] - 0.5f64).abs();
        assert_eq!(tent_contains(&g, &k, &p, TentMode::Full, 2), inside_hull);
    }

    #[test]
    fn gamma_containment_and_overlap() {
        let p = GoodnessParams { r: 4, eps: 0.3, tau: 5, rho: 10, gamma: 2.0 };
        assert!(p.gamma_contained());
        let g = Grid { n: 2, shift: [0.0; 3], top: 0, bottom: 9, lo: [0; 3], hi: [0; 3], map: QuasiMap::Identity };
        let k = Cube::new(0, [0, 0, 0]).as_alt();
        let m = g.m_deep(&k, p.r, p.eps);
        assert!(m.iter().all(|j| g.dilate_inside(j, p.gamma, &k)));
        let beta = overlap_beta(2, &p);
        let mut worst = 0usize;
        for a in 0..64 {
            for b in 0..64 {
                let u = [(a as f64 + 0.5) / 64.0, (b as f64 + 0.5) / 64.0, 0.0];
                worst = worst.max(m.iter().filter(|j| g.in_dilate(j, p.gamma, &u)).count());
            }
        }
        assert!((worst as f64) <= beta);
    }

    #[test]
    fn better_good_has_no_counterexamples() {
        let p = GoodnessParams { r: 4, eps: 0.3, tau: 5, rho: 10, gamma: 2.0 };
        assert!((better_good_delta(&p) - 0.2 / 9.0).abs() < 1e-15);
        let g = Grid { n: 1, shift: [0.0; 3], top: 0, bottom: 12, lo: [-1, 0, 0], hi: [1, 0, 0], map: QuasiMap::Identity };
        assert_eq!(g.all_cubes().len(), 3 * ((1 << 13) - 1));
        assert!(g.better_good_counterexamples(&p).is_empty());
        let d = better_good_delta(&p);
        // With δ this small no cube at least r − 1 levels below the top meets
        // the hypothesis: 1 − 2^{-3} < 2^{-3δ}.
        assert!(g.all_cubes().iter().all(|j| g.is_good(j, 3, d) == (j.level < 3)));
        let g2 = Grid { n: 2, shift: [0.0; 3], top: 0, bottom: 7, lo: [0, 0, 0], hi: [0, 0, 0], map: QuasiMap::Identity };
        assert!(g2.better_good_counterexamples(&p).is_empty());
    }

    #[test]
    fn spiral_and_shear_invert() {
        let maps = [
            QuasiMap::LogSpiral { eps: 0.2 },
            QuasiMap::Shear { amplitude: vec![0.3], frequency: vec![2.0] },
        ];
        for m in &maps {
            for k in 0..20 {
                let x = [0.1 * k as f64 - 1.0, 0.37 * k as f64 - 2.0, 0.0];
                let y = m.inverse(&m.forward(&x));
                assert!(dist(&x, &y) < 1e-12);
            }
            assert!(m.lipschitz().is_finite());
        }
    }

    #[test]
    fn params_validation() {
        let d = GoodnessParams::defaults(1, 0.0);
        assert_eq!((d.r, d.eps, d.tau, d.rho, d.gamma), (4, 0.25, 5, 10, 2.0));
        assert!(d.validate().is_ok());
        assert!(GoodnessParams { tau: 4, ..d }.validate().is_err());
        assert!(GoodnessParams { rho: 9, ..d }.validate().is_err());
    }

    #[test]
    fn tau_good_implies_good_and_face_sharing_is_bad() {
        let g = grid1(0, 10);
        let p = GoodnessParams { r: 2, eps: 0.3, tau: 3, rho: 6, gamma: 2.0 };
        for lvl in 0..=8 {
            for i in 0..(1i64 << lvl) {
                let j = c1(lvl, i);
                if g.is_tau_good(&j, &p) {
                    assert!(g.is_good(&j, p.r, p.eps));
                }
            }
        }
        assert!(!g.is_good(&c1(5, 0), 2, 0.3));
    }

    proptest! {
        #[test]
        fn children_partition(level in -3i32..6, i in -50i64..50, j in -50i64..50, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let q = Cube::new(level, [i, j, 0]);
            let lo = q.lower(2);
            let u = [lo[0] + a * q.side(), lo[1] + b * q.side(), 0.0];
            prop_assume!(q.contains_u(&u, 2));
            let hits = q.children(2).iter().filter(|c| c.contains_u(&u, 2)).count();
            prop_assert_eq!(hits, 1);
            for c in q.children(2) {
                prop_assert_eq!(c.parent(), q);
                prop_assert!(q.contains(&c));
            }
        }

        #[test]
        fn neighbours_symmetric_disjoint(level in -2i32..5, i in -20i64..20, j in -20i64..20) {
            let q = Cube::new(level, [i, j, 0]);
            for k in q.neighbours(2) {
                prop_assert!(k.neighbours(2).contains(&q));
                prop_assert!(!k.contains(&q) && !q.contains(&k));
                prop_assert_eq!(k.level, q.level);
            }
        }

        #[test]
        fn deep_embedding_down_closed(lvl in 3i32..9, i in 0i64..256) {
            let j = Cube::new(lvl, [i % (1 << lvl), 0, 0]);
            let k = Cube::new(0, [0; 3]).as_alt();
            if deeply_embedded(&j, &k, 2, 0.4, 1) {
                for c in j.children(1) {
                    prop_assert!(deeply_embedded(&c, &k, 2, 0.4, 1));
                }
            }
        }
    }
}
