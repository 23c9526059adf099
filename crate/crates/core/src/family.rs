//! A measure pair together with a finite family of grids and the per-grid
//! Haar systems and goodness flags that every constant is computed from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::geometry::{pow2, GoodnessParams, Grid, Point, QuasiMap, MAX_DIM};
use crate::haar::{GoodEnergies, Haar};
use crate::measures::{common_points, AtomicMeasure, CommonPoints};
use crate::tree::{CubeTree, OMEGA, SIGMA};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridOptions {
    /// Number of seeded random shifts added to the canonical grid.
    pub shifts: usize,
    pub max_depth: u32,
    pub seed: u64,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { shifts: 8, max_depth: 40, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct GridCtx {
    pub tree: CubeTree,
    pub haar: [Haar; 2],
    pub good: Vec<bool>,
    pub tau_good: Vec<bool>,
    pub energies: [GoodEnergies; 2],
}

impl GridCtx {
    pub fn new(grid: Grid, sigma: &AtomicMeasure, omega: &AtomicMeasure, p: &GoodnessParams) -> GridCtx {
        let tree = CubeTree::build(grid, sigma, omega);
        let haar = [Haar::build(&tree, SIGMA), Haar::build(&tree, OMEGA)];
        let good: Vec<bool> = tree.nodes.iter().map(|nd| tree.grid.is_good(&nd.cube, p.r, p.eps)).collect();
        let tau_good = tree.nodes.iter().map(|nd| tree.grid.is_tau_good(&nd.cube, p)).collect();
        let energies = [GoodEnergies::new(&tree, &haar[0], &good), GoodEnergies::new(&tree, &haar[1], &good)];
        GridCtx { tree, haar, good, tau_good, energies }
    }

    pub fn grid(&self) -> &Grid {
        &self.tree.grid
    }
}

#[derive(Clone, Debug)]
pub struct Family {
    pub n: usize,
    pub alpha: f64,
    pub params: GoodnessParams,
    pub sigma: AtomicMeasure,
    pub omega: AtomicMeasure,
    pub common: CommonPoints,
    pub grids: Vec<GridCtx>,
}

impl Family {
    pub fn new(
        sigma: AtomicMeasure,
        omega: AtomicMeasure,
        alpha: f64,
        params: GoodnessParams,
        map: QuasiMap,
        opts: &GridOptions,
    ) -> Result<Family> {
        let n = sigma.n.max(omega.n);
        if sigma.n != omega.n {
            return Err(param("n", "σ and ω must share a dimension"));
        }
        if !(alpha >= 0.0 && alpha < n as f64) {
            return Err(param("alpha", format!("must lie in [0, {n})")));
        }
        params.validate()?;
        let clouds: [&[Point]; 2] = [&sigma.points, &omega.points];
        let canonical = Grid::fit(n, map.clone(), [0.0; MAX_DIM], &clouds, opts.max_depth)?;
        let side = pow2(-canonical.top);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut grids = vec![canonical];
        for _ in 0..opts.shifts {
            let mut s = [0.0; MAX_DIM];
            for v in s.iter_mut().take(n) {
                *v = rng.gen::<f64>() * side;
            }
            grids.push(Grid::fit(n, map.clone(), s, &clouds, opts.max_depth)?);
        }
        let grids = grids.into_par_iter().map(|g| GridCtx::new(g, &sigma, &omega, &params)).collect();
        let common = common_points(&sigma, &omega);
        Ok(Family { n, alpha, params, sigma, omega, common, grids })
    }

    /// Exponent `n − α`.
    pub fn s(&self) -> f64 {
        self.n as f64 - self.alpha
    }

    pub fn canonical(&self) -> &GridCtx {
        &self.grids[0]
    }

    /// Serializable description of the grid family.
    pub fn describe(&self) -> Vec<GridSummary> {
        self.grids
            .iter()
            .map(|g| GridSummary {
                shift: g.grid().shift[..self.n].to_vec(),
                top: g.grid().top,
                bottom: g.grid().bottom,
                nodes: g.tree.nodes.len(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub shift: Vec<f64>,
    pub top: i32,
    pub bottom: i32,
    pub nodes: usize,
}

/// Which measure carries the energy (Haar) side; the other one enters the
/// Poisson integrals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Dual,
}

impl Direction {
    /// `(poisson side, energy side)`.
    pub fn sides(self) -> (usize, usize) {
        match self {
            Direction::Forward => (SIGMA, OMEGA),
            Direction::Dual => (OMEGA, SIGMA),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Dual => "dual",
        }
    }
}
