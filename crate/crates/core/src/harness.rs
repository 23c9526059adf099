//! Experiment configuration, suites and reports behind the `twoweight`
//! command line.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corona::{
    admissible_pairs, bottom_up_split, carleson_everywhere, cz_stopping, energy_corona, size_recursion, tau_overlap, CEnergy,
    StopEntry, StoppingTree,
};
use crate::energy::{deep_energy_holes, refined_energy, strong_energy, EnergyVariant, Projection};
use crate::error::{param, Error, Result};
use crate::family::{Direction, Family, GridOptions, GridSummary};
use crate::geometry::{overlap_beta, Cube, GoodnessParams, Grid, QuasiMap};
use crate::haar::{gram_and_parseval, telescope_residual, variance, Haar};
use crate::measures::{common_points, generate, greedy_split, Atom, AtomicMeasure, Generator};
use crate::muckenhoupt::{
    classical_a2, energy_a2, offset_a2, plugged_energy_a2, punctured_a2, tailed_a2, ConstantWitness, Witness,
};
use crate::operator::{
    default_bounds, mono_ratio, op_norm_sweep, pivotal_ratio, testing_constant, truncation_sweep, wbp_constant, KernelFamily,
    KernelSpec, Truncation,
};
use crate::tree::{CubeTree, OMEGA, SIGMA};

pub const SCHEMA_VERSION: u32 = 1;

/// Suite-wide necessity constant, calibrated by brute force over the seeded
/// necessity suite.
pub const C_NEC: f64 = 2.0;

/// Instances with more atoms than this are rejected.
pub const MAX_ATOMS: usize = 128;

fn schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Inline { sigma: Vec<Atom>, omega: Vec<Atom> },
    Generated { generator: Generator, instances: usize },
}

/// Goodness parameters; missing fields take the defaults for `(n, α)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamsSpec {
    pub r: Option<u32>,
    pub eps: Option<f64>,
    pub tau: Option<u32>,
    pub rho: Option<u32>,
    pub gamma: Option<f64>,
}

impl ParamsSpec {
    pub fn resolve(&self, n: usize, alpha: f64) -> GoodnessParams {
        let d = GoodnessParams::defaults(n, alpha);
        let r = self.r.unwrap_or(d.r);
        let tau = self.tau.unwrap_or(r + 1);
        GoodnessParams {
            r,
            eps: self.eps.unwrap_or(d.eps),
            tau,
            rho: self.rho.unwrap_or(r + tau + 1),
            gamma: self.gamma.unwrap_or(d.gamma),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationKind {
    Tangent,
    Cutoff,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    pub truncation: TruncationKind,
    /// `(δ, R)`; per-instance defaults when absent.
    pub bounds: Option<(f64, f64)>,
    pub c_cz: f64,
    pub delta_smooth: f64,
    /// Number of widening steps in the truncation sweep for `𝔑`.
    pub sweep: u32,
    pub tol: f64,
    pub c_comp: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: KernelFamily::RieszComponent { component: 0 },
            truncation: TruncationKind::Tangent,
            bounds: None,
            c_cz: 1.0,
            delta_smooth: 1.0,
            sweep: 0,
            tol: 1e-10,
            c_comp: 2.0,
        }
    }
}

impl KernelConfig {
    pub fn spec(&self, alpha: f64, sigma: &AtomicMeasure, omega: &AtomicMeasure) -> KernelSpec {
        let (d, r) = self.bounds.unwrap_or_else(|| default_bounds(sigma, omega));
        let truncation = match self.truncation {
            TruncationKind::Tangent => Truncation::Tangent { delta: d, r_max: r },
            TruncationKind::Cutoff => Truncation::Cutoff { delta: d, r_max: r },
            TruncationKind::None => Truncation::None,
        };
        KernelSpec { alpha, family: self.family.clone(), truncation, c_cz: self.c_cz, delta_smooth: self.delta_smooth }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Suites {
    pub haar: bool,
    pub a2: bool,
    pub greedy: bool,
    pub chain: bool,
    pub geometry: bool,
    pub operator: bool,
    pub corona: bool,
    pub size: bool,
    pub ratios: bool,
}

impl Default for Suites {
    fn default() -> Self {
        Suites { haar: true, a2: true, greedy: true, chain: true, geometry: true, operator: true, corona: true, size: true, ratios: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoronaOptions {
    /// Calderón–Zygmund jump `C`.
    pub cz_c: f64,
    pub c_energy: CEnergy,
    pub eps_split: Vec<f64>,
    pub rounds: usize,
}

impl Default for CoronaOptions {
    fn default() -> Self {
        CoronaOptions { cz_c: 2.0, c_energy: CEnergy::Auto, eps_split: vec![0.1, 0.5], rounds: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NecessityOptions {
    pub c_nec: f64,
}

impl Default for NecessityOptions {
    fn default() -> Self {
        NecessityOptions { c_nec: C_NEC }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    pub n: usize,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub grids: GridOptions,
    #[serde(default = "identity")]
    pub quasimap: QuasiMap,
    pub measures: MeasureSpec,
    #[serde(default)]
    pub params: ParamsSpec,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub suites: Suites,
    #[serde(default)]
    pub corona: CoronaOptions,
    #[serde(default)]
    pub necessity: NecessityOptions,
}

fn identity() -> QuasiMap {
    QuasiMap::Identity
}

impl ExperimentConfig {
    /// Fills defaults and checks every constraint.
    pub fn resolve(mut self) -> Result<ExperimentConfig> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(param("schema_version", format!("expected {SCHEMA_VERSION}")));
        }
        if self.n == 0 || self.n > 3 {
            return Err(param("n", "must lie in 1..=3"));
        }
        if !(self.alpha >= 0.0 && self.alpha < self.n as f64) {
            return Err(param("alpha", format!("must lie in [0, {})", self.n)));
        }
        let p = self.params.resolve(self.n, self.alpha);
        p.validate()?;
        self.params = ParamsSpec { r: Some(p.r), eps: Some(p.eps), tau: Some(p.tau), rho: Some(p.rho), gamma: Some(p.gamma) };
        self.quasimap.validate(self.n)?;
        let probe = AtomicMeasure::new(self.n, vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![1.0, 1.0])?;
        self.kernel.spec(self.alpha, &probe, &probe).validate(self.n)?;
        if !(self.kernel.tol > 0.0) {
            return Err(param("kernel.tol", "must be positive"));
        }
        if !(self.kernel.c_comp >= 1.0) {
            return Err(param("kernel.c_comp", "must be at least 1"));
        }
        if !(self.corona.cz_c > 1.0) {
            return Err(param("corona.cz_c", "must exceed 1"));
        }
        if let CEnergy::Value(v) = self.corona.c_energy {
            if !(v > 0.0) {
                return Err(param("corona.c_energy", "must be positive"));
            }
        }
        if self.corona.eps_split.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(param("corona.eps_split", "entries must lie in (0, 1)"));
        }
        if !(self.necessity.c_nec > 0.0) {
            return Err(param("necessity.c_nec", "must be positive"));
        }
        if let MeasureSpec::Generated { instances, .. } = self.measures {
            if instances == 0 {
                return Err(param("measures.instances", "must be positive"));
            }
        }
        Ok(self)
    }

    pub fn goodness(&self) -> GoodnessParams {
        self.params.resolve(self.n, self.alpha)
    }
}

/// Reads, parses and resolves a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.resolve()
}

/// Deterministic per-instance seed.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Instance {
    pub index: usize,
    pub seed: u64,
    pub sigma: AtomicMeasure,
    pub omega: AtomicMeasure,
}

pub fn instances(cfg: &ExperimentConfig) -> Result<Vec<Instance>> {
    let out = match &cfg.measures {
        MeasureSpec::Inline { sigma, omega } => vec![Instance {
            index: 0,
            seed: cfg.seed,
            sigma: AtomicMeasure::from_atoms(cfg.n, sigma)?,
            omega: AtomicMeasure::from_atoms(cfg.n, omega)?,
        }],
        MeasureSpec::Generated { generator, instances } => (0..*instances)
            .map(|i| {
                let seed = sub_seed(cfg.seed, i as u64);
                let (sigma, omega) = generate(seed, cfg.n, generator);
                Instance { index: i, seed, sigma, omega }
            })
            .collect(),
    };
    for inst in &out {
        if inst.sigma.len() + inst.omega.len() > MAX_ATOMS {
            return Err(Error::Config(format!("instance {} has more than {MAX_ATOMS} atoms", inst.index)));
        }
    }
    Ok(out)
}

pub fn build_family(cfg: &ExperimentConfig, inst: &Instance) -> Result<Family> {
    let opts = GridOptions { seed: sub_seed(inst.seed, cfg.grids.seed), ..cfg.grids.clone() };
    Family::new(inst.sigma.clone(), inst.omega.clone(), cfg.alpha, cfg.goodness(), cfg.quasimap.clone(), &opts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Constants,
    Verify,
    Necessity,
    Corona,
    Sizelemma,
}

impl Command {
    pub fn parse(s: &str) -> Result<Command> {
        Ok(match s {
            "constants" => Command::Constants,
            "verify" => Command::Verify,
            "necessity" => Command::Necessity,
            "corona" => Command::Corona,
            "sizelemma" => Command::Sizelemma,
            _ => return Err(Error::Config(format!("unknown command `{s}`"))),
        })
    }
}

/// One inequality check: `lhs ≤ rhs` where `rhs` already carries the
/// constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub instance: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
    pub pass: bool,
    pub witness: Witness,
}

impl Check {
    fn le(name: impl Into<String>, instance: usize, lhs: f64, rhs: f64, constant: f64, witness: Witness) -> Check {
        Check { name: name.into(), instance, lhs, rhs, constant, pass: lhs <= rhs, witness }
    }
}

/// One row of an empirical-ratio table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub table: String,
    pub instance: usize,
    pub cube: Option<Cube>,
    pub columns: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    pub kind: String,
    pub grid: usize,
    pub c0: f64,
    pub cubes: Vec<StopEntry>,
}

impl StoppingReport {
    fn new(kind: &str, fam: &Family, tree: &StoppingTree) -> Self {
        StoppingReport { kind: kind.into(), grid: tree.grid, c0: tree.c0, cubes: tree.describe(&fam.grids[tree.grid].tree) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub seed: u64,
    pub sigma_atoms: usize,
    pub omega_atoms: usize,
    pub common_atoms: usize,
    pub grids: Vec<GridSummary>,
    pub constants: Vec<ConstantWitness>,
    pub trees: Vec<StoppingReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub instances: usize,
    pub checks: usize,
    pub failed: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub command: Command,
    pub config: ExperimentConfig,
    pub instances: Vec<InstanceReport>,
    pub checks: Vec<Check>,
    pub ratios: Vec<RatioRow>,
    pub summary: Summary,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Ratio tables as CSV: `table,instance,cube,column,value`.
    pub fn ratios_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "instance", "level", "index", "column", "value"]).map_err(csv_err)?;
        for r in &self.ratios {
            let (lvl, idx) = match &r.cube {
                Some(c) => (c.level.to_string(), format!("{:?}", &c.idx[..self.config.n])),
                None => (String::new(), String::new()),
            };
            for (k, v) in &r.columns {
                w.write_record([r.table.as_str(), &r.instance.to_string(), &lvl, &idx, k, &format!("{v:e}")]).map_err(csv_err)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(e.to_string())
}

#[derive(Default)]
struct Outcome {
    constants: Vec<ConstantWitness>,
    trees: Vec<StoppingReport>,
    checks: Vec<Check>,
    ratios: Vec<RatioRow>,
}

const DIRS: [Direction; 2] = [Direction::Forward, Direction::Dual];

fn test_function(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * 10f64.powf(rng.gen_range(-1.0..2.0))).collect()
}

fn heaviest_root(fam: &Family) -> Option<usize> {
    let t = &fam.grids[0].tree;
    t.roots
        .iter()
        .copied()
        .filter(|&r| t.nodes[r].mass[SIGMA] > 0.0)
        .max_by(|&a, &b| t.nodes[a].mass[SIGMA].total_cmp(&t.nodes[b].mass[SIGMA]).then(b.cmp(&a)))
}

fn norm(cfg: &ExperimentConfig, fam: &Family) -> Result<(KernelSpec, f64)> {
    let spec = cfg.kernel.spec(cfg.alpha, &fam.sigma, &fam.omega);
    let sweep = truncation_sweep(&spec.truncation, cfg.kernel.sweep);
    let nn = op_norm_sweep(&fam.sigma, &fam.omega, &spec, &sweep, cfg.kernel.tol)?.norm;
    Ok((spec, nn))
}

/// The full table of named constants for one instance.
pub fn constant_table(cfg: &ExperimentConfig, fam: &Family) -> Result<Vec<ConstantWitness>> {
    let mut out = vec![offset_a2(fam), classical_a2(fam)];
    for dir in DIRS {
        out.push(tailed_a2(fam, dir));
        out.push(punctured_a2(fam, dir));
        out.push(energy_a2(fam, dir));
        out.push(plugged_energy_a2(fam, dir));
    }
    for dir in DIRS {
        out.extend(deep_energy_holes(fam, dir, Projection::Subgood));
        out.push(refined_energy(fam, dir, EnergyVariant::DEEP));
        out.push(strong_energy(fam, dir));
    }
    let (spec, nn) = norm(cfg, fam)?;
    for dir in DIRS {
        out.push(testing_constant(fam, &spec, dir, false)?);
        out.push(testing_constant(fam, &spec, dir, true)?);
    }
    out.push(wbp_constant(fam, &spec, cfg.kernel.c_comp)?);
    out.push(ConstantWitness::finite("norm", nn, Witness::None, "operator matrix at the configured truncations"));
    Ok(out)
}

/// Depth at which the Haar checks rebuild each grid, so that every leaf
/// holds one point and the identities are exact rather than truncated.
const RESOLVED_DEPTH: u32 = 40;

fn haar_checks(fam: &Family, inst: &Instance, out: &mut Outcome) -> Result<()> {
    let (mut gram, mut pars, mut tele, mut ener) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for ctx in &fam.grids {
        let g = &ctx.tree.grid;
        let grid = Grid::fit(fam.n, g.map.clone(), g.shift, &[&fam.sigma.points, &fam.omega.points], RESOLVED_DEPTH)?;
        let t = &CubeTree::build(grid, &fam.sigma, &fam.omega);
        for w in [SIGMA, OMEGA] {
            let haar = Haar::build(t, w);
            let f = test_function(t.points[w].len(), sub_seed(inst.seed, 10 + w as u64));
            let (g, p) = gram_and_parseval(t, &haar, &f);
            gram = gram.max(g);
            pars = pars.max(p);
            for &root in &t.roots {
                for q in t.subtree(root) {
                    if let Some(r) = telescope_residual(t, &haar, &f, q, root) {
                        tele = tele.max(r);
                    }
                }
            }
            for q in 0..t.nodes.len() {
                let v = variance(t, w, &t.nodes[q].atoms[w]);
                ener = ener.max((haar.subtree[q] - v).abs() / v.max(1.0));
            }
        }
    }
    for (name, v) in [("haar.gram", gram), ("haar.parseval", pars), ("haar.telescope", tele), ("haar.energy_identity", ener)] {
        out.checks.push(Check::le(name, inst.index, v, 1e-9, 1e-9, Witness::None));
    }
    Ok(())
}

fn a2_checks(fam: &Family, inst: &Instance, out: &mut Outcome) {
    let k = (fam.n as f64).max(3.0);
    for dir in DIRS {
        let e = energy_a2(fam, dir);
        let p = punctured_a2(fam, dir);
        out.checks.push(Check::le(
            format!("a2.energy_vs_punctured_{}", dir.label()),
            inst.index,
            e.value,
            k * p.value * (1.0 + 1e-12),
            k,
            e.witness.clone(),
        ));
        let t = tailed_a2(fam, dir);
        let pl = plugged_energy_a2(fam, dir);
        out.checks.push(Check::le(
            format!("a2.plugged_split_{}", dir.label()),
            inst.index,
            pl.value,
            (fam.n as f64 * t.value + e.value) * (1.0 + 1e-12),
            fam.n as f64,
            pl.witness,
        ));
    }
}

fn greedy_checks(fam: &Family, inst: &Instance, out: &mut Outcome) {
    let ctx = &fam.grids[0];
    let g = ctx.grid();
    let (mut worst_s, mut worst_w) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut ws, mut ww) = (Witness::None, Witness::None);
    let mut shared = 0usize;
    for nd in &ctx.tree.nodes {
        let q = nd.cube;
        let split = greedy_split(&fam.sigma, &fam.omega, g, &q);
        let es = 0.5 * nd.mass[SIGMA] - split.sigma.total();
        let ew = 0.5 * fam.omega.punctured_mass(g, &q, &fam.common) - split.omega.total();
        if es > worst_s {
            worst_s = es;
            ws = Witness::Node { grid: 0, cube: q };
        }
        if ew > worst_w {
            worst_w = ew;
            ww = Witness::Node { grid: 0, cube: q };
        }
        shared += common_points(&split.sigma, &split.omega).pairs.len();
    }
    if ctx.tree.nodes.is_empty() {
        return;
    }
    out.checks.push(Check::le("greedy.sigma_half", inst.index, worst_s, 0.0, 0.5, ws));
    out.checks.push(Check::le("greedy.omega_half", inst.index, worst_w, 0.0, 0.5, ww));
    out.checks.push(Check::le("greedy.no_common", inst.index, shared as f64, 0.0, 0.0, Witness::None));
}

fn chain_checks(fam: &Family, inst: &Instance, out: &mut Outcome) {
    for dir in DIRS {
        let [g, u, p] = deep_energy_holes(fam, dir, Projection::Subgood);
        out.checks.push(Check::le(format!("chain.gamma_unit_{}", dir.label()), inst.index, g.value, u.value, 1.0, g.witness));
        out.checks.push(Check::le(format!("chain.unit_plugged_{}", dir.label()), inst.index, u.value, p.value, 1.0, u.witness));
    }
}

fn geometry_checks(fam: &Family, inst: &Instance, out: &mut Outcome) {
    let p = &fam.params;
    let ctx = &fam.grids[0];
    let t = &ctx.tree;
    let g = ctx.grid();
    let n = fam.n;
    let mut outside = 0usize;
    let mut worst = 0usize;
    let mut wit = Witness::None;
    for nd in &t.nodes {
        let k = nd.cube.as_alt();
        let m = g.m_deep(&k, p.r, p.eps);
        if p.gamma_contained() {
            outside += m.iter().filter(|j| !g.dilate_inside(j, p.gamma, &k)).count();
        }
        for w in [SIGMA, OMEGA] {
            for i in &nd.atoms[w] {
                let u = &t.coords[w][*i];
                let c = m.iter().filter(|j| g.in_dilate(j, p.gamma, u)).count();
                if c > worst {
                    worst = c;
                    wit = Witness::Node { grid: 0, cube: nd.cube };
                }
            }
        }
    }
    if p.gamma_contained() {
        out.checks.push(Check::le("geometry.gamma_contained", inst.index, outside as f64, 0.0, p.gamma, Witness::None));
    }
    let beta = overlap_beta(n, p);
    out.checks.push(Check::le("geometry.overlap", inst.index, worst as f64, beta, beta, wit));
    let lo = 1.0 / p.r as f64;
    if p.eps > lo && p.eps < 1.0 - lo {
        let count: usize = g.all_cubes().len();
        if count <= 200_000 {
            let bad = g.better_good_counterexamples(p);
            let w = bad.first().map_or(Witness::None, |c| Witness::Node { grid: 0, cube: *c });
            out.checks.push(Check::le("geometry.better_good", inst.index, bad.len() as f64, 0.0, 0.0, w));
        }
    }
}

fn operator_checks(cfg: &ExperimentConfig, fam: &Family, inst: &Instance, out: &mut Outcome) -> Result<()> {
    let (spec, nn) = norm(cfg, fam)?;
    let slack = nn * (1.0 + 1e-9);
    for dir in DIRS {
        let t = testing_constant(fam, &spec, dir, false)?;
        out.checks.push(Check::le(format!("operator.testing_{}", dir.label()), inst.index, t.value, slack, 1.0, t.witness));
    }
    let w = wbp_constant(fam, &spec, cfg.kernel.c_comp)?;
    out.checks.push(Check::le("operator.wbp", inst.index, w.value, slack, 1.0, w.witness));
    Ok(())
}

/// Mono and pivotal ratios at up to `limit` cubes, and their invariance
/// under doubling every coordinate, with the untruncated kernel.
fn ratio_checks(cfg: &ExperimentConfig, fam: &Family, inst: &Instance, out: &mut Outcome, limit: usize) -> Result<()> {
    if !cfg.quasimap.is_identity() {
        return Ok(());
    }
    let spec = cfg.kernel.spec(cfg.alpha, &fam.sigma, &fam.omega).untruncated();
    let doubled = Family::new(
        fam.sigma.dilated(2.0),
        fam.omega.dilated(2.0),
        fam.alpha,
        fam.params,
        QuasiMap::Identity,
        &GridOptions { shifts: 0, seed: inst.seed, ..cfg.grids.clone() },
    )?;
    let ctx = &fam.grids[0];
    let t = &ctx.tree;
    let t2 = &doubled.grids[0].tree;
    let mut worst = 0.0f64;
    let mut wit = Witness::None;
    let mut done = 0;
    for j in 0..t.nodes.len() {
        if done >= limit {
            break;
        }
        if ctx.haar[OMEGA].x_energy[j] <= 0.0 {
            continue;
        }
        let jc = t.nodes[j].cube;
        let Some(j2) = t2.node(&Cube::new(jc.level - 1, jc.idx)) else { continue };
        let g = t.grid.clone();
        let mu = fam.sigma.restrict(|z| !g.in_dilate(&jc, 2.0, &g.coords(z)));
        let nu = fam.sigma.restrict(|z| !g.in_dilate(&jc, fam.params.gamma, &g.coords(z)));
        if mu.is_empty() && nu.is_empty() {
            continue;
        }
        let a = mono_ratio(fam, 0, j, &mu, &spec)?;
        let b = mono_ratio(&doubled, 0, j2, &mu.dilated(2.0), &spec)?;
        let psi = ctx.haar[OMEGA].functions(t, j)[0].clone();
        let psi2 = doubled.grids[0].haar[OMEGA].functions(t2, j2)[0].clone();
        let pa = pivotal_ratio(fam, 0, j, &psi, &nu, &spec)?;
        let pb = pivotal_ratio(&doubled, 0, j2, &psi2, &nu.dilated(2.0), &spec)?;
        for (x, y) in [(a.ratio, b.ratio), (pa, pb)] {
            let d = if x > 0.0 { (x - y).abs() / x } else { y.abs() };
            if d > worst {
                worst = d;
                wit = Witness::Node { grid: 0, cube: jc };
            }
        }
        out.ratios.push(RatioRow {
            table: "mono".into(),
            instance: inst.index,
            cube: Some(jc),
            columns: vec![("lhs".into(), a.lhs), ("phi".into(), a.phi), ("ratio".into(), a.ratio), ("ratio_doubled".into(), b.ratio)],
        });
        out.ratios.push(RatioRow {
            table: "pivotal".into(),
            instance: inst.index,
            cube: Some(jc),
            columns: vec![("ratio".into(), pa), ("ratio_doubled".into(), pb)],
        });
        done += 1;
    }
    out.checks.push(Check::le("ratios.homogeneity", inst.index, worst, 1e-12, 1e-12, wit));
    Ok(())
}

fn corona_checks(cfg: &ExperimentConfig, fam: &Family, inst: &Instance, out: &mut Outcome) -> Result<Option<StoppingTree>> {
    let Some(top) = heaviest_root(fam) else { return Ok(None) };
    let f = test_function(fam.sigma.len(), sub_seed(inst.seed, 20));
    let c = cfg.corona.cz_c;
    let cz = cz_stopping(fam, 0, &f, top, c)?;
    let chk = cz.validate(fam, &f, c)?;
    let w = Witness::Node { grid: 0, cube: fam.grids[0].tree.nodes[top].cube };
    let names = ["corona.cz_averages", "corona.cz_carleson", "corona.cz_quasi_orthogonal", "corona.cz_monotone"];
    let vals = [(chk.averages, c), (chk.carleson, cz.c0), (chk.quasi_orthogonality, cz.c0 * cz.c0), (0.0, 0.0)];
    for ((name, (lhs, rhs)), holds) in names.iter().zip(vals).zip(chk.holds) {
        out.checks.push(Check { name: name.to_string(), instance: inst.index, lhs, rhs, constant: rhs, pass: holds, witness: w.clone() });
    }
    let (ov, at) = tau_overlap(fam, &cz);
    let ow = at.map_or(Witness::None, |q| Witness::Node { grid: 0, cube: fam.grids[0].tree.nodes[q].cube });
    out.checks.push(Check::le("corona.tau_overlap", inst.index, ov as f64, fam.params.tau as f64, fam.params.tau as f64, ow));
    out.trees.push(StoppingReport::new("calderon_zygmund", fam, &cz));

    let ec = energy_corona(fam, 0, top, Direction::Forward, cfg.corona.c_energy)?;
    let t = &fam.grids[0].tree;
    let (worst, ok) = carleson_everywhere(t, &ec.tree, 2.0);
    out.checks.push(Check { name: "corona.energy_carleson".into(), instance: inst.index, lhs: worst, rhs: 2.0, constant: 2.0, pass: ok, witness: w });
    out.ratios.push(RatioRow {
        table: "energy_corona".into(),
        instance: inst.index,
        cube: None,
        columns: vec![
            ("c_energy".into(), ec.c_energy),
            ("base".into(), ec.base),
            ("doublings".into(), ec.doublings as f64),
            ("stopping_cubes".into(), ec.tree.cubes.len() as f64),
        ],
    });
    out.trees.push(StoppingReport::new("energy", fam, &ec.tree));
    Ok(Some(cz))
}

fn size_checks(cfg: &ExperimentConfig, fam: &Family, inst: &Instance, tree: &StoppingTree, out: &mut Outcome) -> Result<()> {
    let t = &fam.grids[tree.grid].tree;
    for k in 0..tree.cubes.len() {
        let p = admissible_pairs(fam, tree, k, true);
        let w = Witness::Node { grid: tree.grid, cube: t.nodes[tree.cubes[k]].cube };
        for &eps in &cfg.corona.eps_split {
            let s = bottom_up_split(fam, &p, eps, Direction::Forward)?;
            let lost = if s.conserves(&p) { 0.0 } else { 1.0 };
            out.checks.push(Check::le(format!("size.conservation_{eps}"), inst.index, lost, 0.0, 0.0, w.clone()));
            let sup = s.small.iter().map(|c| c.size).fold(0.0, f64::max);
            out.checks.push(Check {
                name: format!("size.small_{eps}"),
                instance: inst.index,
                lhs: sup,
                rhs: eps * s.size,
                constant: eps,
                pass: s.small_bound(),
                witness: w.clone(),
            });
            if s.size > 0.0 {
                let (se, _) = crate::energy::stopping_energy(fam, tree.grid, Direction::Forward, tree.cubes[k], &p.seconds());
                out.ratios.push(RatioRow {
                    table: "size".into(),
                    instance: inst.index,
                    cube: Some(t.nodes[tree.cubes[k]].cube),
                    columns: vec![
                        ("eps".into(), eps),
                        ("size".into(), s.size),
                        ("worst_small_ratio".into(), s.worst_ratio()),
                        ("small_classes".into(), s.small.len() as f64),
                        ("uncovered".into(), s.uncovered as f64),
                        ("size_over_stopping_energy".into(), if se > 0.0 { s.size / se } else { f64::INFINITY }),
                    ],
                });
            }
        }
        if let Some(&eps) = cfg.corona.eps_split.first() {
            if !p.pairs.is_empty() {
                for r in size_recursion(fam, &p, eps, Direction::Forward, cfg.corona.rounds)? {
                    out.ratios.push(RatioRow {
                        table: "size_rounds".into(),
                        instance: inst.index,
                        cube: Some(t.nodes[tree.cubes[k]].cube),
                        columns: vec![
                            ("round".into(), r.round as f64),
                            ("classes".into(), r.classes as f64),
                            ("worst_ratio".into(), r.worst_ratio),
                        ],
                    });
                    out.checks.push(Check::le(
                        format!("size.round_{}", r.round),
                        inst.index,
                        if r.conserved && r.small_bound { 0.0 } else { 1.0 },
                        0.0,
                        eps,
                        w.clone(),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn necessity(cfg: &ExperimentConfig, fam: &Family, inst: &Instance, out: &mut Outcome) -> Result<()> {
    let (_, nn) = norm(cfg, fam)?;
    let c = cfg.necessity.c_nec;
    let off = offset_a2(fam);
    let root = off.value.sqrt();
    let mut cols = vec![("norm".into(), nn), ("sqrt_offset_a2".into(), root)];
    if fam.common.is_empty() {
        out.checks.push(Check::le("necessity.offset", inst.index, root, c * nn, c, off.witness));
    } else {
        let p = DIRS.map(|d| punctured_a2(fam, d));
        let (v, w) = if p[0].value >= p[1].value { (p[0].value, p[0].witness.clone()) } else { (p[1].value, p[1].witness.clone()) };
        cols.push(("sqrt_punctured_a2".into(), v.sqrt()));
        out.checks.push(Check::le("necessity.punctured", inst.index, v.sqrt(), 2.0 * c.sqrt() * nn, 2.0 * c.sqrt(), w));
    }
    cols.push(("ratio".into(), if nn > 0.0 { root / nn } else { f64::INFINITY }));
    out.ratios.push(RatioRow { table: "necessity".into(), instance: inst.index, cube: None, columns: cols });
    Ok(())
}

fn run_instance(cmd: Command, cfg: &ExperimentConfig, inst: &Instance) -> Result<(InstanceReport, Outcome)> {
    let fam = build_family(cfg, inst)?;
    let mut out = Outcome::default();
    let s = &cfg.suites;
    match cmd {
        Command::Constants => out.constants = constant_table(cfg, &fam)?,
        Command::Verify => {
            if s.haar {
                haar_checks(&fam, inst, &mut out)?;
            }
            if s.a2 {
                a2_checks(&fam, inst, &mut out);
            }
            if s.greedy {
                greedy_checks(&fam, inst, &mut out);
            }
            if s.chain {
                chain_checks(&fam, inst, &mut out);
            }
            if s.geometry {
                geometry_checks(&fam, inst, &mut out);
            }
            if s.operator {
                operator_checks(cfg, &fam, inst, &mut out)?;
            }
            if s.ratios {
                ratio_checks(cfg, &fam, inst, &mut out, 8)?;
            }
            if s.corona || s.size {
                if let Some(tree) = corona_checks(cfg, &fam, inst, &mut out)? {
                    if s.size {
                        size_checks(cfg, &fam, inst, &tree, &mut out)?;
                    }
                }
            }
        }
        Command::Necessity => necessity(cfg, &fam, inst, &mut out)?,
        Command::Corona => {
            corona_checks(cfg, &fam, inst, &mut out)?;
        }
        Command::Sizelemma => {
            let mut scratch = Outcome::default();
            if let Some(tree) = corona_checks(cfg, &fam, inst, &mut scratch)? {
                size_checks(cfg, &fam, inst, &tree, &mut out)?;
                out.trees = scratch.trees.into_iter().filter(|t| t.kind == "calderon_zygmund").collect();
            }
        }
    }
    let rep = InstanceReport {
        index: inst.index,
        seed: inst.seed,
        sigma_atoms: fam.sigma.len(),
        omega_atoms: fam.omega.len(),
        common_atoms: fam.common.pairs.len(),
        grids: fam.describe(),
        constants: std::mem::take(&mut out.constants),
        trees: std::mem::take(&mut out.trees),
    };
    Ok((rep, out))
}

/// Runs a command over every instance of the configuration.
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Report> {
    let insts = instances(cfg)?;
    let results: Vec<Result<(InstanceReport, Outcome)>> = insts.par_iter().map(|i| run_instance(cmd, cfg, i)).collect();
    let mut instances = Vec::new();
    let mut checks = Vec::new();
    let mut ratios = Vec::new();
    for (inst, r) in insts.iter().zip(results) {
        let (rep, out) = r.map_err(|e| Error::Config(format!("instance {} (seed {}): {e}", inst.index, inst.seed)))?;
        instances.push(rep);
        checks.extend(out.checks);
        ratios.extend(out.ratios);
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    let summary = Summary { instances: instances.len(), checks: checks.len(), failed, passed: failed == 0 };
    Ok(Report { schema_version: SCHEMA_VERSION, command: cmd, config: cfg.clone(), instances, checks, ratios, summary })
}
