//! Backward preimage trees and one-step sheet sums.
//!
//! Two expansion modes share the same node layout. `Exact` keeps every
//! preimage with branch index `|j| ≤ K` and is meant for small trees and
//! identity checks. `Merged` keeps the first `explicit_sheets` sheets per
//! family exactly, lumps farther sheets into geometric bins whose mass is
//! integrated along the sheet curve, and then merges children that fall in
//! the same log-polar cell. The heaviest contributor of a cell becomes its
//! representative, so every node is still an actual preimage of `z0`.

use std::collections::HashMap;
use std::f64::consts::LN_10;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::logsum::LogSum;
use crate::maps::{BranchIndex, Preimages, TranscendentalMap};

const GL_X: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GL_W: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
/// Power-law tails decaying slower than this are treated as divergent.
pub const MIN_TAIL_EXPONENT: f64 = 0.05;
const CHUNK: usize = 64;

/// Set of endpoints kept in a restricted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Restriction {
    None,
    /// `|w| < r`
    Disc { r: f64 },
    /// `r1 ≤ |w| < r2`
    Annulus { r1: f64, r2: f64 },
}

impl Restriction {
    pub fn contains(&self, z: Complex64) -> bool {
        let m = z.norm();
        match *self {
            Restriction::None => true,
            Restriction::Disc { r } => m < r,
            Restriction::Annulus { r1, r2 } => r1 <= m && m < r2,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Restriction::None => "none".to_string(),
            Restriction::Disc { r } => format!("disc:{r:e}"),
            Restriction::Annulus { r1, r2 } => format!("annulus:{r1:e}:{r2:e}"),
        }
    }

    /// Integer ranges of `k` on family `p` allowed by the restriction, or `None` if unrestricted.
    fn sheet_ranges(&self, pre: &Preimages, p: usize) -> Option<Vec<(f64, f64)>> {
        let disc = |r: f64| {
            pre.disc_interval(p, r)
                .map(|(a, b)| (a.floor() + 1.0, b.ceil() - 1.0))
                .filter(|(a, b)| a <= b)
        };
        match *self {
            Restriction::None => None,
            Restriction::Disc { r } => Some(disc(r).into_iter().collect()),
            Restriction::Annulus { r1, r2 } => {
                let Some((a2, b2)) = disc(r2) else { return Some(Vec::new()) };
                match disc(r1) {
                    None => Some(vec![(a2, b2)]),
                    Some((a1, b1)) => {
                        let mut v = Vec::new();
                        if a2 <= a1 - 1.0 {
                            v.push((a2, (a1 - 1.0).min(b2)));
                        }
                        if b1 + 1.0 <= b2 {
                            v.push(((b1 + 1.0).max(a2), b2));
                        }
                        Some(v)
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TreeMode {
    /// Every branch with `|j| ≤ k`, no binning or merging.
    Exact { k: u64 },
    /// Binned far sheets and log-polar cell merging.
    Merged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub mode: TreeMode,
    /// Sheets per family handled one by one.
    pub explicit_sheets: u64,
    /// Relative width of far-sheet bins.
    pub bin_ratio: f64,
    /// First expansion cap tried at each level.
    pub initial_cap: f64,
    /// Largest sheet index ever expanded.
    pub max_cap: f64,
    /// Target relative truncation per level.
    pub eps_trunc: f64,
    /// Log-polar cell size for merging.
    pub cell: f64,
    /// Nodes whose lookahead weight is below this fraction of the level total are dropped.
    pub prune: f64,
    pub node_budget: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            mode: TreeMode::Merged,
            explicit_sheets: 12,
            bin_ratio: 0.1,
            initial_cap: 1e8,
            max_cap: 1e60,
            eps_trunc: 1e-4,
            cell: 0.1,
            prune: 1e-16,
            node_budget: 10_000_000,
        }
    }
}

impl TreeConfig {
    pub fn exact(k: u64) -> Self {
        Self {
            mode: TreeMode::Exact { k },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidParameter(m.to_string()));
        if !(self.bin_ratio > 0.0) {
            return bad("bin_ratio must be positive");
        }
        if !(self.cell > 0.0) {
            return bad("cell must be positive");
        }
        if !(self.eps_trunc > 0.0) {
            return bad("eps_trunc must be positive");
        }
        if !(self.max_cap >= self.initial_cap) || self.initial_cap < (self.explicit_sheets + 1) as f64 {
            return bad("need explicit_sheets < initial_cap ≤ max_cap");
        }
        if let TreeMode::Exact { k } = self.mode {
            if k == 0 {
                return bad("exact mode needs K ≥ 1");
            }
        }
        Ok(())
    }
}

/// One node of a preimage tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub z: Complex64,
    /// `ln` of the summed weights `|(fⁿ)*(w)|^{-t}` this node stands for.
    pub log_weight: f64,
    /// `ln|(fⁿ)*(z)|` of the node itself, accumulated step by step.
    pub log_deriv: f64,
    /// `ln S₁(t, z)`.
    pub log_s1: f64,
    pub parent: u32,
    pub family: u8,
    /// Sheet parameter on `family`; integer valued.
    pub sheet: f64,
}

/// A backward orbit `w ∈ f⁻ⁿ(z0)` with its branch address.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOrbit {
    /// Branch indices from `z0` outward.
    pub address: Vec<BranchIndex>,
    pub endpoint: Complex64,
    pub log_deriv: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialSumRecord {
    pub n: usize,
    pub t: f64,
    pub restriction: Restriction,
    /// Per-level sheet cutoff (the largest expansion cap for merged trees).
    pub k_cutoff: f64,
    pub log_sum: f64,
    pub term_count: u64,
    /// Estimated relative truncation error; infinite when the sheet tail looks divergent.
    pub tail_bound: f64,
}

fn log_g(pre: &Preimages, p: usize, k: f64) -> Result<(Complex64, f64)> {
    let z = pre.point(p, k)?;
    Ok((z, pre.log_spherical_derivative(z)))
}

/// `ln ∫_{lo-½}^{hi+½} |f*(z(±κ))|^{-t} dκ` by 3-point Gauss–Legendre.
fn log_bin_mass(pre: &Preimages, t: f64, p: usize, sign: f64, lo: f64, hi: f64) -> Result<f64> {
    let a = lo - 0.5;
    let b = hi + 0.5;
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = LogSum::new();
    for (x, w) in GL_X.iter().zip(GL_W) {
        let (_, lfs) = log_g(pre, p, sign * (mid + half * x))?;
        acc.add_log((w * half).ln() - t * lfs);
    }
    Ok(acc.value())
}

/// Geometric bins `[lo, hi]` of sheet magnitudes starting after `k_e`.
fn far_bins(k_e: u64, ratio: f64, cap: f64) -> impl Iterator<Item = (f64, f64)> {
    let mut lo = (k_e + 1) as f64;
    let mut done = false;
    std::iter::from_fn(move || {
        if done || lo > cap {
            return None;
        }
        let hi = (lo * (1.0 + ratio)).floor().max(lo).min(cap.floor().max(lo));
        // beyond 2^53 adding one is absorbed by rounding
        done = hi >= cap;
        let bin = (lo, hi);
        lo = hi + 1.0;
        Some(bin)
    })
}

fn rep_sheet(lo: f64, hi: f64) -> f64 {
    (lo * hi).sqrt().round().clamp(lo, hi)
}

/// `ln S₁^A(t, ·)` over the preimages of `pre.value()`.
///
/// Exact mode sums `|j| ≤ K` without a tail. Merged mode adds far bins until
/// they are negligible and then a power-law tail; the second return value is
/// the number of terms evaluated.
pub fn log_one_step(pre: &Preimages, t: f64, restriction: Restriction, cfg: &TreeConfig) -> Result<(f64, u64)> {
    let mut acc = LogSum::new();
    let mut terms = 0u64;
    if pre.is_single() {
        let z = pre.branch(0)?;
        if restriction.contains(z) {
            acc.add_log(-t * pre.log_spherical_derivative(z));
        }
        return Ok((acc.value(), 1));
    }
    if let TreeMode::Exact { k } = cfg.mode {
        let k = k as i64;
        for j in -k..=k {
            let z = pre.branch(j)?;
            if restriction.contains(z) {
                acc.add_log(-t * pre.log_spherical_derivative(z));
            }
            terms += 1;
        }
        return Ok((acc.value(), terms));
    }
    let k_e = cfg.explicit_sheets as i64;
    for p in 0..pre.families() {
        for k in -k_e..=k_e {
            let (z, lfs) = log_g(pre, p, k as f64)?;
            if restriction.contains(z) {
                acc.add_log(-t * lfs);
            }
            terms += 1;
        }
    }
    for p in 0..pre.families() {
        match restriction.sheet_ranges(pre, p) {
            None => {
                for sign in [1.0, -1.0] {
                    let mut prev: Option<(f64, f64)> = None;
                    let mut closed = false;
                    let mut alpha = 0.0;
                    let mut last_density = f64::NEG_INFINITY;
                    for (lo, hi) in far_bins(cfg.explicit_sheets, cfg.bin_ratio, cfg.max_cap) {
                        let m = log_bin_mass(pre, t, p, sign, lo, hi)?;
                        terms += 3;
                        acc.add_log(m);
                        let u = (hi + 0.5).ln();
                        let density = m - ((hi + 0.5) / (lo - 0.5)).ln().ln();
                        if let Some((pu, pd)) = prev {
                            alpha = (pd - density) / (u - pu);
                        }
                        prev = Some((u, density));
                        last_density = density;
                        if alpha > 0.5 && m < acc.value() + (1e-20f64).ln() {
                            acc.add_log(density - alpha.ln());
                            closed = true;
                            break;
                        }
                    }
                    if !closed {
                        if alpha > MIN_TAIL_EXPONENT {
                            acc.add_log(last_density - alpha.ln());
                        } else {
                            return Ok((f64::INFINITY, terms));
                        }
                    }
                }
            }
            Some(ranges) => {
                for (a, b) in ranges {
                    for sign in [1.0, -1.0] {
                        // κ = sign·k must lie in [a, b]
                        let (ka, kb) = if sign > 0.0 { (a, b) } else { (-b, -a) };
                        if kb < (cfg.explicit_sheets + 1) as f64 {
                            continue;
                        }
                        for (lo, hi) in far_bins(cfg.explicit_sheets, cfg.bin_ratio, kb) {
                            let lo = lo.max(ka);
                            let hi = hi.min(kb);
                            if lo > hi {
                                continue;
                            }
                            acc.add_log(log_bin_mass(pre, t, p, sign, lo, hi)?);
                            terms += 3;
                        }
                    }
                }
            }
        }
    }
    Ok((acc.value(), terms))
}

/// `ln S₁^A(t, z)` for a single point.
pub fn one_step_sum(
    map: &TranscendentalMap,
    t: f64,
    z: Complex64,
    restriction: Restriction,
    cfg: &TreeConfig,
) -> Result<f64> {
    let pre = map.preimages(z)?;
    Ok(log_one_step(&pre, t, restriction, cfg)?.0)
}

type CellKey = (i8, i64, i64);

fn cell_key(z: Complex64, h: f64) -> CellKey {
    let r = z.norm();
    if r > 1.0 {
        (1, (r.ln() / h).floor() as i64, (z.arg() / h).floor() as i64)
    } else {
        (0, (z.re / h).floor() as i64, (z.im / h).floor() as i64)
    }
}

#[derive(Debug, Clone, Copy)]
struct Child {
    z: Complex64,
    log_weight: f64,
    log_deriv: f64,
    parent: u32,
    family: u8,
    sheet: f64,
}

impl Child {
    fn beats(&self, other: &Child) -> bool {
        if self.log_weight != other.log_weight {
            return self.log_weight > other.log_weight;
        }
        (self.parent, self.family, self.sheet.abs(), self.sheet)
            < (other.parent, other.family, other.sheet.abs(), other.sheet)
    }
}

struct Cell {
    mass: LogSum,
    best: Child,
}

/// Merged preimage tree levels `0..=depth` for fixed `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreimageTree {
    pub map: TranscendentalMap,
    pub t: f64,
    pub z0: Complex64,
    pub config: TreeConfig,
    pub levels: Vec<Vec<TreeNode>>,
    /// Sheet cap used to expand level `d` into level `d+1`.
    pub caps: Vec<f64>,
    /// Relative truncation of each expansion, including pruned mass.
    pub level_tail: Vec<f64>,
}

impl PreimageTree {
    pub fn build(map: &TranscendentalMap, t: f64, z0: Complex64, depth: usize, config: &TreeConfig) -> Result<Self> {
        config.validate()?;
        if !(t > 0.0) {
            return Err(LabError::InvalidParameter(format!("t must be positive, got {t}")));
        }
        let pre = map.preimages(z0).map_err(|e| LabError::OmittedValueAtNode {
            depth: 0,
            node: z0,
            source: Box::new(e),
        })?;
        let (s1, _) = log_one_step(&pre, t, Restriction::None, config)?;
        let root = TreeNode {
            z: z0,
            log_weight: 0.0,
            log_deriv: 0.0,
            log_s1: s1,
            parent: 0,
            family: 0,
            sheet: 0.0,
        };
        let mut tree = Self {
            map: *map,
            t,
            z0,
            config: *config,
            levels: vec![vec![root]],
            caps: Vec::new(),
            level_tail: Vec::new(),
        };
        for d in 0..depth {
            tree.extend_level(d)?;
        }
        Ok(tree)
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// Adds one more level.
    pub fn grow(&mut self) -> Result<()> {
        self.extend_level(self.depth())
    }

    fn extend_level(&mut self, d: usize) -> Result<()> {
        let (next, cap, tail) = match self.config.mode {
            TreeMode::Exact { k } => (self.expand_exact(d, k)?, k as f64, 0.0),
            TreeMode::Merged => self.expand_adaptive(d)?,
        };
        self.levels.push(next);
        self.caps.push(cap);
        self.level_tail.push(tail);
        Ok(())
    }

    fn preimages_at(&self, d: usize, z: Complex64) -> Result<Preimages> {
        self.map.preimages(z).map_err(|e| LabError::OmittedValueAtNode {
            depth: d,
            node: z,
            source: Box::new(e),
        })
    }

    fn with_s1(&self, d: usize, mut nodes: Vec<TreeNode>) -> Result<Vec<TreeNode>> {
        let t = self.t;
        let cfg = self.config;
        nodes
            .par_iter_mut()
            .with_min_len(CHUNK)
            .try_for_each(|n| -> Result<()> {
                let pre = self.preimages_at(d, n.z)?;
                n.log_s1 = log_one_step(&pre, t, Restriction::None, &cfg)?.0;
                Ok(())
            })?;
        Ok(nodes)
    }

    fn expand_exact(&self, d: usize, k: u64) -> Result<Vec<TreeNode>> {
        let level = &self.levels[d];
        let count = level.len().saturating_mul(2 * k as usize + 1);
        if count > self.config.node_budget {
            return Err(LabError::TreeBudgetExceeded {
                depth: d + 1,
                budget: self.config.node_budget,
            });
        }
        let k = k as i64;
        let mut out = Vec::with_capacity(count);
        for (i, node) in level.iter().enumerate() {
            let pre = self.preimages_at(d, node.z)?;
            if pre.is_single() {
                let z = pre.branch(0)?;
                let lfs = pre.log_spherical_derivative(z);
                out.push(TreeNode {
                    z,
                    log_weight: node.log_weight - self.t * lfs,
                    log_deriv: node.log_deriv + lfs,
                    log_s1: 0.0,
                    parent: i as u32,
                    family: 0,
                    sheet: 0.0,
                });
                continue;
            }
            for j in -k..=k {
                let z = pre.branch(j)?;
                let (p, kk) = pre.split_index(j);
                let lfs = pre.log_spherical_derivative(z);
                out.push(TreeNode {
                    z,
                    log_weight: node.log_weight - self.t * lfs,
                    log_deriv: node.log_deriv + lfs,
                    log_s1: 0.0,
                    parent: i as u32,
                    family: p as u8,
                    sheet: kk as f64,
                });
            }
        }
        self.with_s1(d + 1, out)
    }

    fn children_into(&self, d: usize, idx: usize, cap: f64, cells: &mut HashMap<CellKey, Cell>) -> Result<u64> {
        let h = self.config.cell;
        self.for_each_child(d, idx, cap, |c: Child| {
            let key = cell_key(c.z, h);
            match cells.get_mut(&key) {
                Some(cell) => {
                    cell.mass.add_log(c.log_weight);
                    if c.beats(&cell.best) {
                        cell.best = c;
                    }
                }
                None => {
                    cells.insert(
                        key,
                        Cell {
                            mass: LogSum::from_log(c.log_weight),
                            best: c,
                        },
                    );
                }
            }
        })
    }

    fn for_each_child(&self, d: usize, idx: usize, cap: f64, mut push: impl FnMut(Child)) -> Result<u64> {
        let node = &self.levels[d][idx];
        let pre = self.preimages_at(d, node.z)?;
        let t = self.t;
        let mut count = 0u64;
        if pre.is_single() {
            let z = pre.branch(0)?;
            let lfs = pre.log_spherical_derivative(z);
            push(Child {
                z,
                log_weight: node.log_weight - t * lfs,
                log_deriv: node.log_deriv + lfs,
                parent: idx as u32,
                family: 0,
                sheet: 0.0,
            });
            return Ok(1);
        }
        let k_e = self.config.explicit_sheets as i64;
        for p in 0..pre.families() {
            for k in -k_e..=k_e {
                let (z, lfs) = log_g(&pre, p, k as f64)?;
                push(Child {
                    z,
                    log_weight: node.log_weight - t * lfs,
                    log_deriv: node.log_deriv + lfs,
                    parent: idx as u32,
                    family: p as u8,
                    sheet: k as f64,
                });
                count += 1;
            }
            for (lo, hi) in far_bins(self.config.explicit_sheets, self.config.bin_ratio, cap) {
                for sign in [1.0, -1.0] {
                    let m = log_bin_mass(&pre, t, p, sign, lo, hi)?;
                    let k = sign * rep_sheet(lo, hi);
                    let (z, lfs) = log_g(&pre, p, k)?;
                    push(Child {
                        z,
                        log_weight: node.log_weight + m,
                        log_deriv: node.log_deriv + lfs,
                        parent: idx as u32,
                        family: p as u8,
                        sheet: k,
                    });
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    /// Children of the depth-`d` nodes before merging, as `(z, ln weight)`.
    ///
    /// Uses the same sheets and cap as the expansion into depth `d+1`;
    /// children lighter than `min_rel` times the heaviest one are dropped.
    pub fn raw_children(&self, d: usize, min_rel: f64) -> Result<Vec<(Complex64, f64)>> {
        if d >= self.depth() {
            return Err(LabError::InvalidParameter(format!("depth {d} has not been expanded")));
        }
        let mut all: Vec<(Complex64, f64)> = if let TreeMode::Exact { .. } = self.config.mode {
            self.levels[d + 1].iter().map(|c| (c.z, c.log_weight)).collect()
        } else {
            self.unmerged(d)?
        };
        let top = all.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        let floor = top + min_rel.ln();
        all.retain(|c| c.1 >= floor);
        Ok(all)
    }

    fn unmerged(&self, d: usize) -> Result<Vec<(Complex64, f64)>> {
        let cap = self.caps[d];
        let n = self.levels[d].len();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<Vec<(Complex64, f64)>> = starts
            .par_iter()
            .map(|&s| -> Result<_> {
                let mut out = Vec::new();
                for i in s..(s + CHUNK).min(n) {
                    self.for_each_child(d, i, cap, |c| out.push((c.z, c.log_weight)))?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    fn expand_merged(&self, d: usize, cap: f64) -> Result<Vec<TreeNode>> {
        let n = self.levels[d].len();
        let starts: Vec<usize> = (0..n).step_by(CHUNK).collect();
        let parts: Vec<(HashMap<CellKey, Cell>, u64)> = starts
            .par_iter()
            .map(|&s| -> Result<_> {
                let mut cells = HashMap::new();
                let mut count = 0;
                for i in s..(s + CHUNK).min(n) {
                    count += self.children_into(d, i, cap, &mut cells)?;
                }
                Ok((cells, count))
            })
            .collect::<Result<_>>()?;
        let mut merged: HashMap<CellKey, Cell> = HashMap::new();
        for (cells, _) in parts {
            for (key, cell) in cells {
                match merged.get_mut(&key) {
                    Some(m) => {
                        m.mass.merge(&cell.mass);
                        if cell.best.beats(&m.best) {
                            m.best = cell.best;
                        }
                    }
                    None => {
                        merged.insert(key, cell);
                    }
                }
            }
        }
        if merged.len() > self.config.node_budget {
            return Err(LabError::TreeBudgetExceeded {
                depth: d + 1,
                budget: self.config.node_budget,
            });
        }
        let mut keyed: Vec<(CellKey, Cell)> = merged.into_iter().collect();
        keyed.sort_by_key(|(k, _)| *k);
        let nodes = keyed
            .into_iter()
            .map(|(_, c)| TreeNode {
                z: c.best.z,
                log_weight: c.mass.value(),
                log_deriv: c.best.log_deriv,
                log_s1: 0.0,
                parent: c.best.parent,
                family: c.best.family,
                sheet: c.best.sheet,
            })
            .collect();
        self.with_s1(d + 1, nodes)
    }

    /// `ln` of the lookahead mass beyond sheet `cap` and the fitted decay exponent.
    ///
    /// The density per unit `ln k` of `|f*(z_k)|^{-t} S₁(z_k)` is sampled at
    /// `cap/10` and `cap` over all nodes and extrapolated as a power law.
    fn tail_beyond(&self, d: usize, cap: f64) -> Result<(f64, f64)> {
        let t = self.t;
        let cfg = self.config;
        let dens: Vec<(LogSum, LogSum)> = self.levels[d]
            .par_iter()
            .with_min_len(CHUNK)
            .map(|node| -> Result<(LogSum, LogSum)> {
                let pre = self.preimages_at(d, node.z)?;
                let mut a = LogSum::new();
                let mut b = LogSum::new();
                if pre.is_single() {
                    return Ok((a, b));
                }
                for p in 0..pre.families() {
                    for sign in [1.0, -1.0] {
                        for (k, acc) in [(cap / 10.0, &mut a), (cap, &mut b)] {
                            let (z, lfs) = log_g(&pre, p, sign * k.round())?;
                            let s1 = one_step_sum(&self.map, t, z, Restriction::None, &cfg)?;
                            acc.add_log(node.log_weight - t * lfs + k.ln() + s1);
                        }
                    }
                }
                Ok((a, b))
            })
            .collect::<Result<_>>()?;
        let mut a = LogSum::new();
        let mut b = LogSum::new();
        for (x, y) in &dens {
            a.merge(x);
            b.merge(y);
        }
        let (la, lb) = (a.value(), b.value());
        if lb == f64::NEG_INFINITY {
            return Ok((f64::NEG_INFINITY, f64::INFINITY));
        }
        let alpha = (la - lb) / LN_10;
        if alpha > MIN_TAIL_EXPONENT {
            Ok((lb - alpha.ln(), alpha))
        } else {
            Ok((f64::INFINITY, alpha))
        }
    }

    fn expand_adaptive(&self, d: usize) -> Result<(Vec<TreeNode>, f64, f64)> {
        let cfg = self.config;
        let mut cap = cfg.initial_cap;
        loop {
            let next = self.expand_merged(d, cap)?;
            let total: LogSum = next.iter().map(|n| n.log_weight + n.log_s1).collect();
            let total = total.value();
            let (tail, alpha) = self.tail_beyond(d, cap)?;
            let rel = (tail - total).exp();
            if rel <= cfg.eps_trunc || cap >= cfg.max_cap || !total.is_finite() {
                let (kept, pruned) = self.prune(next, total);
                return Ok((kept, cap, rel + pruned));
            }
            let factor = if tail.is_finite() && alpha > MIN_TAIL_EXPONENT {
                (10.0 * rel / cfg.eps_trunc).powf(1.0 / alpha).max(100.0)
            } else {
                f64::INFINITY
            };
            cap = (cap * factor).min(cfg.max_cap);
        }
    }

    fn prune(&self, nodes: Vec<TreeNode>, log_total: f64) -> (Vec<TreeNode>, f64) {
        if !log_total.is_finite() {
            return (nodes, 0.0);
        }
        let floor = log_total + self.config.prune.ln();
        let mut dropped = LogSum::new();
        let kept = nodes
            .into_iter()
            .filter(|n| {
                let imp = n.log_weight + n.log_s1;
                if imp < floor {
                    dropped.add_log(imp);
                    false
                } else {
                    true
                }
            })
            .collect();
        (kept, (dropped.value() - log_total).exp())
    }

    /// `Sₙ^A(t, z0)` from the nodes at depth `n-1`, `1 ≤ n ≤ depth + 1`; `S₀ = 1`.
    pub fn partial_sum(&self, n: usize, restriction: Restriction) -> Result<PartialSumRecord> {
        let k_cutoff = match self.config.mode {
            TreeMode::Exact { k } => k as f64,
            TreeMode::Merged => self.caps.iter().copied().fold(self.config.initial_cap, f64::max),
        };
        if n == 0 {
            let inside = restriction.contains(self.z0);
            return Ok(PartialSumRecord {
                n,
                t: self.t,
                restriction,
                k_cutoff,
                log_sum: if inside { 0.0 } else { f64::NEG_INFINITY },
                term_count: 1,
                tail_bound: 0.0,
            });
        }
        if n > self.depth() + 1 {
            return Err(LabError::InsufficientDepth {
                required: n - 1,
                got: self.depth(),
            });
        }
        let level = &self.levels[n - 1];
        let cfg = self.config;
        let t = self.t;
        let parts: Vec<(LogSum, u64)> = level
            .par_iter()
            .with_min_len(CHUNK)
            .map(|node| -> Result<(LogSum, u64)> {
                let (s1, terms) = if restriction == Restriction::None {
                    let terms = match cfg.mode {
                        TreeMode::Exact { k } => 2 * k + 1,
                        TreeMode::Merged => 0,
                    };
                    (node.log_s1, terms)
                } else {
                    let pre = self.preimages_at(n - 1, node.z)?;
                    log_one_step(&pre, t, restriction, &cfg)?
                };
                Ok((LogSum::from_log(node.log_weight + s1), terms))
            })
            .collect::<Result<_>>()?;
        let mut acc = LogSum::new();
        let mut term_count = 0u64;
        for (s, c) in &parts {
            acc.merge(s);
            term_count += c;
        }
        if term_count == 0 {
            term_count = level.len() as u64;
        }
        let tail_bound = match cfg.mode {
            TreeMode::Merged => self.level_tail[..n - 1].iter().sum(),
            TreeMode::Exact { .. } => self.exact_tail(n)?,
        };
        Ok(PartialSumRecord {
            n,
            t,
            restriction,
            k_cutoff,
            log_sum: acc.value(),
            term_count,
            tail_bound,
        })
    }

    /// Relative size of the last-step sheet tail `Σ_{|j|>K}` for exact trees.
    fn exact_tail(&self, n: usize) -> Result<f64> {
        let full = TreeConfig {
            mode: TreeMode::Merged,
            ..self.config
        };
        let mut kept = LogSum::new();
        let mut all = LogSum::new();
        for node in &self.levels[n - 1] {
            let pre = self.preimages_at(n - 1, node.z)?;
            kept.add_log(node.log_weight + node.log_s1);
            all.add_log(node.log_weight + log_one_step(&pre, self.t, Restriction::None, &full)?.0);
        }
        Ok((1.0 - (kept.value() - all.value()).exp()).max(0.0))
    }

    /// `ln Σ` of node weights at depth `d`.
    pub fn layer_log_mass(&self, d: usize) -> f64 {
        self.levels[d].iter().map(|n| n.log_weight).collect::<LogSum>().value()
    }

    fn branch_index(&self, node: &TreeNode) -> BranchIndex {
        let k = node.sheet as i64;
        if self.map.family() == crate::maps::Family::Sin {
            BranchIndex(2 * k + node.family as i64)
        } else {
            BranchIndex(k)
        }
    }

    /// Backward orbit ending at node `idx` of depth `d`.
    pub fn orbit(&self, d: usize, idx: usize) -> BranchOrbit {
        let mut address = Vec::with_capacity(d);
        let mut i = idx;
        for level in (1..=d).rev() {
            let node = &self.levels[level][i];
            address.push(self.branch_index(node));
            i = node.parent as usize;
        }
        address.reverse();
        let node = &self.levels[d][idx];
        BranchOrbit {
            address,
            endpoint: node.z,
            log_deriv: node.log_deriv,
            depth: d,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn z0() -> Complex64 {
        Complex64::new(1.781_337_023_421_627_7, 0.0)
    }

    #[test]
    fn s1_exp_closed_form() {
        // brute force over |k| ≤ 10⁴ of ((1+|1+2πik|²)·e/(1+e²))^{-2}
        let f = TranscendentalMap::exp(1.0).unwrap();
        let e = std::f64::consts::E;
        let brute: f64 = (-10_000i64..=10_000)
            .map(|k| {
                let z = Complex64::new(1.0, std::f64::consts::TAU * k as f64);
                ((1.0 + z.norm_sqr()) * e / (1.0 + e * e)).powi(-2)
            })
            .sum();
        let exact = one_step_sum(&f, 2.0, Complex64::new(e, 0.0), Restriction::None, &TreeConfig::exact(10_000)).unwrap();
        assert_relative_eq!(exact.exp(), brute, max_relative = 1e-12);
        let merged = one_step_sum(&f, 2.0, Complex64::new(e, 0.0), Restriction::None, &TreeConfig::default()).unwrap();
        // the remaining tail beyond 10⁴ is about 1e-13 relative
        assert_relative_eq!(merged.exp(), brute, max_relative = 1e-8);
    }

    #[test]
    fn exact_one_step_recursion() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let tree = PreimageTree::build(&f, 1.5, z0(), 3, &TreeConfig::exact(4)).unwrap();
        for n in 1..=3 {
            let direct: LogSum = tree.levels[n].iter().map(|n| n.log_weight).collect();
            let rec = tree.partial_sum(n, Restriction::None).unwrap();
            assert_relative_eq!(direct.value(), rec.log_sum, epsilon = 1e-12);
        }
    }

    #[test]
    fn exact_chain_rule() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let tree = PreimageTree::build(&f, 1.5, z0(), 3, &TreeConfig::exact(3)).unwrap();
        for (i, node) in tree.levels[3].iter().enumerate() {
            let mut z = node.z;
            let mut direct = 0.0;
            for _ in 0..3 {
                direct += f.log_spherical_derivative(z);
                z = f.evaluate(z).value;
            }
            assert!((z - z0()).norm() < 1e-9);
            assert_relative_eq!(direct, node.log_deriv, max_relative = 1e-9, epsilon = 1e-12);
            let orbit = tree.orbit(3, i);
            assert_eq!(orbit.address.len(), 3);
        }
    }

    #[test]
    fn restriction_and_annulus_identities() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let tree = PreimageTree::build(&f, 1.5, z0(), 2, &TreeConfig::exact(6)).unwrap();
        let full = tree.partial_sum(3, Restriction::None).unwrap().log_sum;
        let r = 20.0;
        let inner = tree.partial_sum(3, Restriction::Disc { r }).unwrap().log_sum;
        let outer = tree.partial_sum(3, Restriction::Disc { r: 2.0 * r }).unwrap().log_sum;
        let ann = tree
            .partial_sum(3, Restriction::Annulus { r1: r, r2: 2.0 * r })
            .unwrap()
            .log_sum;
        assert!(inner <= outer && outer <= full);
        assert_relative_eq!(outer.exp(), inner.exp() + ann.exp(), max_relative = 1e-13);
    }

    #[test]
    fn sums_grow_with_cutoff() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for k in [1, 2, 4, 8] {
            let tree = PreimageTree::build(&f, 2.0, z0(), 1, &TreeConfig::exact(k)).unwrap();
            let s = tree.partial_sum(2, Restriction::None).unwrap();
            assert!(s.log_sum >= prev);
            prev = s.log_sum;
        }
    }

    #[test]
    fn merged_matches_exact_at_depth_two() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let exact = PreimageTree::build(&f, 2.0, z0(), 1, &TreeConfig::exact(3000)).unwrap();
        let merged = PreimageTree::build(&f, 2.0, z0(), 1, &TreeConfig::default()).unwrap();
        let a = exact.partial_sum(2, Restriction::None).unwrap().log_sum;
        let b = merged.partial_sum(2, Restriction::None).unwrap().log_sum;
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
    }

    #[test]
    fn merged_restricted_disc_close_to_exact() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let r = Restriction::Disc { r: 1e3 };
        let exact = PreimageTree::build(&f, 1.5, z0(), 1, &TreeConfig::exact(400)).unwrap();
        let merged = PreimageTree::build(&f, 1.5, z0(), 1, &TreeConfig::default()).unwrap();
        let a = exact.partial_sum(2, r).unwrap().log_sum;
        let b = merged.partial_sum(2, r).unwrap().log_sum;
        assert!((a - b).abs() < 2e-3, "{a} vs {b}");
    }

    #[test]
    fn merged_nodes_are_preimages() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let tree = PreimageTree::build(&f, 1.5, z0(), 3, &TreeConfig::default()).unwrap();
        for d in 1..=3 {
            for (i, node) in tree.levels[d].iter().enumerate().step_by(37) {
                let back = f.iterate(node.z, d);
                if node.z.norm() < 1e6 {
                    assert!((back.value - z0()).norm() < 1e-6, "depth {d} node {i}");
                }
                let _ = tree.orbit(d, i);
            }
        }
    }

    #[test]
    fn zexp_origin_tree_is_a_single_chain() {
        let f = TranscendentalMap::zexp();
        let tree = PreimageTree::build(&f, 1.0, Complex64::new(0.0, 0.0), 3, &TreeConfig::default()).unwrap();
        for d in 0..=3 {
            assert_eq!(tree.levels[d].len(), 1);
            assert_eq!(tree.levels[d][0].log_weight, 0.0);
        }
    }

    #[test]
    fn omitted_root_is_reported() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let err = PreimageTree::build(&f, 1.5, Complex64::new(0.0, 0.0), 2, &TreeConfig::default()).unwrap_err();
        assert!(matches!(err, LabError::OmittedValueAtNode { depth: 0, .. }));
    }
}
