//! Empirical checks of distortion bounds and a box-counting dimension estimate.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::maps::{Family, Preimages, TranscendentalMap};
use crate::tree::{one_step_sum, PreimageTree, Restriction, TreeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct DistortionParams {
    pub r: Option<f64>,
    pub l: Option<f64>,
    pub lambda_koebe: Option<f64>,
    pub t: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionReport {
    pub lemma: String,
    pub samples: usize,
    /// Worst normalized ratio: the largest for upper bounds, the smallest for lower bounds.
    pub worst_ratio: f64,
    pub fitted_c: f64,
    pub bound_holds: bool,
    pub params: DistortionParams,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|z|` log-uniform on `[lo, hi]`, argument uniform.
fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Complex64 {
    let r = (rng.gen_range(lo.ln()..=hi.ln())).exp();
    let th = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Complex64::from_polar(r, th)
}

/// Inverse branch of `fⁿ` continued from the branch chain at a base point.
struct BranchChain<'a> {
    map: &'a TranscendentalMap,
    centers: Vec<Complex64>,
}

impl<'a> BranchChain<'a> {
    fn new(map: &'a TranscendentalMap, base: Complex64, address: &[i64]) -> Result<Self> {
        let mut centers = vec![base];
        for &j in address {
            let c = *centers.last().expect("nonempty");
            centers.push(map.preimages(c)?.branch(j)?);
        }
        Ok(Self { map, centers })
    }

    /// `(g(z), ln|g*(z)|)`.
    fn eval(&self, z: Complex64) -> Result<(Complex64, f64)> {
        let mut cur = z;
        let mut ld = 0.0;
        for c in &self.centers[1..] {
            let (_, w) = self.map.preimage_near(cur, *c)?;
            ld -= self.map.log_spherical_derivative(w);
            cur = w;
        }
        Ok((cur, ld))
    }
}

fn uniform_in_disc(rng: &mut ChaCha8Rng, c: Complex64, r: f64) -> Complex64 {
    let rho = r * rng.gen::<f64>().sqrt();
    let th = rng.gen_range(0.0..std::f64::consts::TAU);
    c + Complex64::from_polar(rho, th)
}

/// Ratio extremes of `|g*|` for an inverse branch of `fⁿ` on `𝒟(center, λr)`.
///
/// `c` is fitted at the first (smallest) `λ` as `worst·(1−λ)⁴` and reused
/// for the others. The first `λ` is also checked with `z₁ = z₂ = center`.
pub fn koebe_ratio_check(
    map: &TranscendentalMap,
    center: Complex64,
    r: f64,
    lambdas: &[f64],
    address: &[i64],
    samples: usize,
    seed: u64,
) -> Result<Vec<DistortionReport>> {
    if lambdas.is_empty() || lambdas.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(LabError::InvalidParameter("λ values must lie in (0, 1)".into()));
    }
    let n = address.len().max(1);
    let mut post = Vec::new();
    for v in map.singular_values() {
        let mut cur = v;
        for _ in 0..n {
            post.push(cur);
            let e = map.evaluate(cur);
            if e.at_infinity {
                break;
            }
            cur = e.value;
        }
    }
    if let Some(p) = post.iter().find(|p| (**p - center).norm() <= r) {
        return Err(LabError::BranchUndefined { point: *p });
    }
    let address: Vec<i64> = if address.is_empty() { vec![0] } else { address.to_vec() };
    let chain = BranchChain::new(map, center, &address)?;
    let (_, l0) = chain.eval(center)?;
    let (_, l1) = chain.eval(center)?;
    let identity = (l0 - l1).exp();
    let mut rng = rng(seed);
    let mut fitted: Option<f64> = None;
    let mut out = Vec::new();
    for &lam in lambdas {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..2 * samples {
            let (_, l) = chain.eval(uniform_in_disc(&mut rng, center, lam * r))?;
            lo = lo.min(l);
            hi = hi.max(l);
        }
        let worst = (hi - lo).exp().max(identity);
        let scale = (1.0 - lam).powi(4);
        let c = *fitted.get_or_insert(worst * scale);
        out.push(DistortionReport {
            lemma: "koebe".into(),
            samples,
            worst_ratio: worst,
            fitted_c: c,
            bound_holds: worst <= c / scale * (1.0 + 1e-12),
            params: DistortionParams {
                r: Some(r),
                lambda_koebe: Some(lam),
                ..Default::default()
            },
        });
    }
    Ok(out)
}

/// Asymptotic values whose tracts are sampled: `None` is `∞`, `Some(a)` a finite value
/// read in the coordinate `u = 1/(w − a)`.
fn tracts(map: &TranscendentalMap) -> Vec<Option<Complex64>> {
    match map.family() {
        Family::Tan => {
            let a = map.lambda() * Complex64::i();
            vec![Some(a), Some(-a)]
        }
        _ => vec![None],
    }
}

fn tract_branch(map: &TranscendentalMap, r_tract: f64, l: f64) -> Result<()> {
    if !(l > 1.0) || !(r_tract > 1.0) {
        return Err(LabError::InvalidParameter("need R > 1 and L > 1".into()));
    }
    for a in tracts(map) {
        let sing = map
            .singular_values()
            .iter()
            .filter_map(|v| match a {
                None => Some(v.norm()),
                Some(a) if (v - a).norm() > 0.0 => Some(1.0 / (v - a).norm()),
                Some(_) => None,
            })
            .fold(0.0, f64::max);
        if r_tract <= sing {
            return Err(LabError::InvalidParameter(format!(
                "R = {r_tract} does not exceed the singular values in the tract coordinate (max modulus {sing})"
            )));
        }
    }
    Ok(())
}

fn sheet_sample(rng: &mut ChaCha8Rng, pre: &Preimages) -> (usize, f64) {
    let p = rng.gen_range(0..pre.families());
    let k = [0.0, 1.0, -1.0, 3.0, -5.0][rng.gen_range(0..5)];
    (p, k)
}

/// Preimage on sheet `(p, k)` of the point with tract coordinate `u`, with `ln|g*(u)|`.
fn tract_point(map: &TranscendentalMap, tract: Option<Complex64>, u: Complex64, p: usize, k: f64) -> Result<(Complex64, f64)> {
    match tract {
        None => {
            let pre = map.preimages(u)?;
            let z = pre.point(p, k)?;
            Ok((z, -pre.log_spherical_derivative(z)))
        }
        Some(a) => {
            let w = a + u.inv();
            let pre = map.preimages(w)?;
            let z = pre.point(p, k)?;
            let lf = (w + a).norm().ln() + u.norm().ln() - map.lambda().norm().ln() + crate::maps::ln1p_sq(z.norm())
                - crate::maps::ln1p_sq(u.norm());
            Ok((z, -lf))
        }
    }
}

struct PairStats {
    /// `(|z₁|/|z₂|, ln|z₁|/ln|z₂|, |g(z₁)|/|g(z₂)|, |g*(z₁)|/|g*(z₂)|)`
    rows: Vec<(f64, f64, f64, f64)>,
}

fn tract_pairs(map: &TranscendentalMap, lo: f64, hi: f64, samples: usize, seed: u64) -> Result<PairStats> {
    let tracts = tracts(map);
    let mut rng = rng(seed);
    let mut rows = Vec::with_capacity(samples + 1);
    let u = Complex64::new(lo * 1.5, 0.3);
    let (g1, d1) = tract_point(map, tracts[0], u, 0, 0.0)?;
    let (g2, d2) = tract_point(map, tracts[0], u, 0, 0.0)?;
    rows.push((1.0, 1.0, g1.norm() / g2.norm(), (d1 - d2).exp()));
    for _ in 0..samples {
        let tract = tracts[rng.gen_range(0..tracts.len())];
        let mut z1 = log_uniform(&mut rng, lo, hi);
        let mut z2 = log_uniform(&mut rng, lo, hi);
        if z1.norm() < z2.norm() {
            std::mem::swap(&mut z1, &mut z2);
        }
        let pre = match tract {
            None => map.preimages(z1)?,
            Some(a) => map.preimages(a + z1.inv())?,
        };
        let (p, k) = sheet_sample(&mut rng, &pre);
        let (g1, ld1) = tract_point(map, tract, z1, p, k)?;
        let (g2, ld2) = tract_point(map, tract, z2, p, k)?;
        rows.push((
            z1.norm() / z2.norm(),
            z1.norm().ln() / z2.norm().ln(),
            g1.norm() / g2.norm(),
            (ld1 - ld2).exp(),
        ));
    }
    Ok(PairStats { rows })
}

/// Two-sided check of `c⁻¹ b^{-4π} < |g(z₁)|/|g(z₂)| < c b^{4π}`, `b = ln|z₁|/ln|z₂|`.
///
/// `c` is fitted on pairs with `|z| ∈ [LR, e·LR]` and reused on pairs
/// log-uniform over `[LR, 10⁶]`.
pub fn tract_modulus_ratio_check(map: &TranscendentalMap, r_tract: f64, l: f64, samples: usize, seed: u64) -> Result<DistortionReport> {
    tract_branch(map, r_tract, l)?;
    let q = |&(_, b, g, _): &(f64, f64, f64, f64)| {
        let e = 4.0 * std::f64::consts::PI * b.ln();
        let up = g.ln() - e;
        let lo = -(g.ln() + e);
        up.max(lo).exp()
    };
    tract_report("tract_modulus", map, r_tract, l, samples, seed, q)
}

/// Two-sided check of `c⁻¹ a b⁻³ ≤ |g*(z₁)|/|g*(z₂)| ≤ c a b`, `a = |z₁|/|z₂|`.
pub fn tract_derivative_ratio_check(
    map: &TranscendentalMap,
    r_tract: f64,
    l: f64,
    samples: usize,
    seed: u64,
) -> Result<DistortionReport> {
    tract_branch(map, r_tract, l)?;
    let q = |&(a, b, _, gs): &(f64, f64, f64, f64)| {
        let up = gs.ln() - a.ln() - b.ln();
        let lo = -(gs.ln() - a.ln() + 3.0 * b.ln());
        up.max(lo).exp()
    };
    tract_report("tract_derivative", map, r_tract, l, samples, seed, q)
}

fn tract_report(
    lemma: &str,
    map: &TranscendentalMap,
    r_tract: f64,
    l: f64,
    samples: usize,
    seed: u64,
    q: impl Fn(&(f64, f64, f64, f64)) -> f64,
) -> Result<DistortionReport> {
    let lo = l * r_tract;
    let cal = tract_pairs(map, lo, lo * std::f64::consts::E, samples, seed)?;
    let run = tract_pairs(map, lo, 1e6f64.max(10.0 * lo), samples, seed.wrapping_add(1))?;
    let c = cal.rows.iter().map(&q).fold(1.0, f64::max);
    let worst = run.rows.iter().map(&q).fold(0.0, f64::max);
    Ok(DistortionReport {
        lemma: lemma.into(),
        samples,
        worst_ratio: worst,
        fitted_c: c,
        bound_holds: worst <= c,
        params: DistortionParams {
            r: Some(r_tract),
            l: Some(l),
            ..Default::default()
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepRow {
    pub z: Complex64,
    /// `S₁` restricted to the disc of radius `(ln|z|)^{4π}`.
    pub log_s1: f64,
    /// `ln` of `S₁ / (|z|^t/(ln|z|)^{3t})`.
    pub log_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepReport {
    pub report: DistortionReport,
    pub rows: Vec<OneStepRow>,
    /// Fitted `c₂`; the disc constant `c₁` is fixed at 1.
    pub c2: f64,
}

/// Radius `c₁(ln r)^{4π}` with `c₁ = 1`.
pub fn tract_disc_radius(r: f64) -> f64 {
    (4.0 * std::f64::consts::PI * r.ln().ln()).exp()
}

/// `S₁` on the disc of radius `(ln|z|)^{4π}` against `|z|^t/(ln|z|)^{3t}`.
///
/// `c₂` is the smallest ratio among samples with `|z| ≤ e·r0` and must bound
/// every other sample from below.
pub fn one_step_lower_bound_check(map: &TranscendentalMap, t: f64, zs: &[Complex64], r0: f64, cfg: &TreeConfig) -> Result<OneStepReport> {
    if map.family() == Family::Tan {
        return Err(LabError::InvalidParameter("tan has no logarithmic tract over infinity; large values sit near poles".into()));
    }
    let rows = zs
        .par_iter()
        .filter(|z| z.norm() >= r0)
        .map(|&z| -> Result<OneStepRow> {
            let m = z.norm();
            let log_s1 = one_step_sum(map, t, z, Restriction::Disc { r: tract_disc_radius(m) }, cfg)?;
            Ok(OneStepRow {
                z,
                log_s1,
                log_ratio: log_s1 - t * m.ln() + 3.0 * t * m.ln().ln(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let cal = rows
        .iter()
        .filter(|r| r.z.norm() <= std::f64::consts::E * r0)
        .map(|r| r.log_ratio)
        .fold(f64::INFINITY, f64::min);
    if !cal.is_finite() {
        return Err(LabError::InvalidParameter("no samples at the smallest scale".into()));
    }
    let worst = rows.iter().map(|r| r.log_ratio).fold(f64::INFINITY, f64::min);
    Ok(OneStepReport {
        report: DistortionReport {
            lemma: "one_step_lower".into(),
            samples: rows.len(),
            worst_ratio: worst.exp(),
            fitted_c: cal.exp(),
            bound_holds: worst >= cal,
            params: DistortionParams {
                r: Some(r0),
                t: Some(t),
                ..Default::default()
            },
        },
        rows,
        c2: cal.exp(),
    })
}

/// Log-uniform sample points for the one-step check.
pub fn one_step_samples(r0: f64, r1: f64, count: usize, seed: u64) -> Vec<Complex64> {
    let mut rng = rng(seed);
    (0..count).map(|_| log_uniform(&mut rng, r0, r1)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainedRow {
    pub n: usize,
    pub r: f64,
    pub log_lhs: f64,
    pub log_rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainedReport {
    /// Annulus form: `S_{n+1}` on the disc of radius `(ln 2r)^{4π}` against `c·r^t/(ln 2r)^{3t}·Sₙ` on `𝔻(2r)∖𝔻(r)`.
    pub annulus: DistortionReport,
    /// Dyadic form: `S_{n+1}` against `Σ_k 2^{kt}/k^{3t}·Sₙ` on `𝔻(2^{k+1})∖𝔻(2^k)`.
    pub dyadic: DistortionReport,
    pub rows: Vec<ChainedRow>,
}

/// Chained annulus bounds over depths `1..=n_max` and `r = 2^k`, `k0 ≤ k ≤ k1`.
///
/// Both forms use constants derived from the one-step constant `c_one`
/// (fitted at the smallest scale by [`one_step_lower_bound_check`]): points of
/// `𝔻(2r)∖𝔻(r)` have `S₁ ≥ c_one·r^t/(ln 2r)^{3t}` on the disc of radius
/// `(ln 2r)^{4π}`, and the dyadic form picks up `(k0/(k0+1))^{3t}/(ln 2)^{3t}`.
/// Annuli without depth-`n` mass hold trivially.
pub fn chained_bound_check(tree: &PreimageTree, n_max: usize, k0: u32, k1: u32, c_one: f64) -> Result<ChainedReport> {
    if n_max < 1 || n_max > tree.depth() || k0 < 1 || k1 < k0 || !(c_one > 0.0) {
        return Err(LabError::InvalidParameter("need 1 ≤ n_max ≤ depth, 1 ≤ k0 ≤ k1 and c_one > 0".into()));
    }
    let t = tree.t;
    let mut rows = Vec::new();
    let mut dyadic: Vec<(f64, f64)> = Vec::new();
    for n in 1..=n_max {
        let full = tree.partial_sum(n + 1, Restriction::None)?.log_sum;
        let mut acc = crate::logsum::LogSum::new();
        for k in k0..=k1 {
            let r = 2f64.powi(k as i32);
            let ann = tree.partial_sum(n, Restriction::Annulus { r1: r, r2: 2.0 * r })?.log_sum;
            let disc = tree.partial_sum(n + 1, Restriction::Disc { r: tract_disc_radius(2.0 * r) })?.log_sum;
            let w = t * r.ln() - 3.0 * t * (2.0 * r).ln().ln();
            rows.push(ChainedRow {
                n,
                r,
                log_lhs: disc,
                log_rhs: w + ann,
            });
            acc.add_log(k as f64 * t * std::f64::consts::LN_2 - 3.0 * t * (k as f64).ln() + ann);
        }
        dyadic.push((full, acc.value()));
    }
    let ln_c = c_one.ln();
    let worst_ann = rows
        .iter()
        .filter(|r| r.log_rhs.is_finite())
        .map(|r| r.log_lhs - r.log_rhs)
        .fold(f64::INFINITY, f64::min);
    let k0f = k0 as f64;
    let ln_c_dy = ln_c + 3.0 * t * (k0f / (k0f + 1.0)).ln() - 3.0 * t * std::f64::consts::LN_2.ln();
    let worst_dy = dyadic
        .iter()
        .filter(|(_, r)| r.is_finite())
        .map(|(l, r)| l - r)
        .fold(f64::INFINITY, f64::min);
    let params = DistortionParams {
        r: Some(2f64.powi(k0 as i32)),
        t: Some(t),
        ..Default::default()
    };
    Ok(ChainedReport {
        annulus: DistortionReport {
            lemma: "chained_annulus".into(),
            samples: rows.len(),
            worst_ratio: worst_ann.exp(),
            fitted_c: c_one,
            bound_holds: worst_ann >= ln_c,
            params,
        },
        dyadic: DistortionReport {
            lemma: "chained_dyadic".into(),
            samples: n_max,
            worst_ratio: worst_dy.exp(),
            fitted_c: ln_c_dy.exp(),
            bound_holds: worst_dy >= ln_c_dy,
            params,
        },
        rows,
    })
}

/// Axis-parallel window `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Window {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Result<Self> {
        if !(x1 > x0 && y1 > y0) {
            return Err(LabError::InvalidParameter("empty window".into()));
        }
        Ok(Self { x0, x1, y0, y1 })
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn cells(&self, eps: f64) -> (usize, usize) {
        (
            ((self.x1 - self.x0) / eps).ceil() as usize,
            ((self.y1 - self.y0) / eps).ceil() as usize,
        )
    }
}

/// Parameters of the scale-adapted return test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnTest {
    pub max_iter: usize,
    /// Radius of the bounded region a cell must return to.
    pub r_bnd: f64,
    pub r_esc: f64,
}

impl Default for ReturnTest {
    fn default() -> Self {
        Self {
            max_iter: 300,
            r_bnd: 10.0,
            r_esc: 1e6,
        }
    }
}

/// Disc around an attracting cycle point mapped into itself by the cycle.
fn basin_discs(map: &TranscendentalMap) -> Vec<(Complex64, f64)> {
    let report = map.singular_orbit_report(2000);
    let mut out = Vec::new();
    for c in report.cycles {
        let mut r = 0.1;
        let inside = |r: f64| {
            (0..64).all(|i| {
                let z = c.point + Complex64::from_polar(r, std::f64::consts::TAU * i as f64 / 64.0);
                match map.iterate_with_derivative(z, c.period) {
                    Some((w, _)) => (w - c.point).norm() < r,
                    None => false,
                }
            })
        };
        while r > 1e-6 && !inside(r) {
            r *= 0.5;
        }
        if r > 1e-6 {
            let mut p = c.point;
            for _ in 0..c.period {
                out.push((p, r));
                p = map.evaluate(p).value;
            }
        }
    }
    out
}

/// The orbit of the cell center reaches scale 1 (`|(fⁿ)'|·ε ≥ 1`) inside
/// `𝔻(r_bnd)` before escaping or entering an attracting basin.
fn returns_at_scale(map: &TranscendentalMap, z: Complex64, eps: f64, test: &ReturnTest, basins: &[(Complex64, f64)]) -> bool {
    let mut cur = z;
    let mut lder = eps.ln();
    for _ in 0..test.max_iter {
        let d = map.derivative(cur).norm();
        let e = map.evaluate(cur);
        if e.at_infinity || !d.is_finite() || d == 0.0 {
            return false;
        }
        cur = e.value;
        lder += d.ln();
        let m = cur.norm();
        if !m.is_finite() || m >= test.r_esc || basins.iter().any(|(p, r)| (cur - p).norm() < *r) {
            return false;
        }
        if lder >= 0.0 && m < test.r_bnd {
            return true;
        }
    }
    false
}

/// Marks cells of side `eps` whose centers pass the return test, row-major in `x`.
fn classify_grid(map: &TranscendentalMap, window: &Window, eps: f64, test: &ReturnTest, basins: &[(Complex64, f64)]) -> (usize, usize, Vec<bool>) {
    let (nx, ny) = window.cells(eps);
    let flags: Vec<bool> = (0..nx * ny)
        .into_par_iter()
        .with_min_len(4096)
        .map(|idx| {
            let (i, j) = (idx / ny, idx % ny);
            let z = Complex64::new(window.x0 + (i as f64 + 0.5) * eps, window.y0 + (j as f64 + 0.5) * eps);
            returns_at_scale(map, z, eps, test, basins)
        })
        .collect();
    (nx, ny, flags)
}

fn require_hyperbolic_entire(map: &TranscendentalMap) -> Result<()> {
    if !map.family().is_entire() {
        return Err(LabError::NotHyperbolic(format!("{} is not entire", map.family())));
    }
    let report = map.singular_orbit_report(2000);
    if !report.hyperbolic {
        return Err(LabError::NotHyperbolic(format!("{} with λ = {} has a singular orbit near J", map.family(), map.lambda())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionEstimate {
    pub eps: Vec<f64>,
    pub counts: Vec<u64>,
    /// Fraction of the window covered by counted boxes.
    pub area_fraction: Vec<f64>,
    pub dim: f64,
    /// Slope ± twice its standard error.
    pub ci: (f64, f64),
    pub test: ReturnTest,
}

/// Box-counting dimension of the cells returning at scale.
///
/// Cells are classified once on the finest grid; a coarser box is counted when
/// any of its sub-cells is. Every `eps` must be a power-of-two multiple of the finest.
pub fn boxcount_nonescaping(map: &TranscendentalMap, window: &Window, eps_list: &[f64], test: &ReturnTest) -> Result<DimensionEstimate> {
    require_hyperbolic_entire(map)?;
    if eps_list.len() < 2 {
        return Err(LabError::InvalidParameter("need at least two scales".into()));
    }
    let mut eps: Vec<f64> = eps_list.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    let fine = *eps.last().expect("nonempty");
    let factors: Vec<usize> = eps
        .iter()
        .map(|e| {
            let f = (e / fine).round();
            if (f - e / fine).abs() > 1e-9 || (f as usize).count_ones() != 1 {
                Err(LabError::InvalidParameter(format!("scale {e} is not a power-of-two multiple of {fine}")))
            } else {
                Ok(f as usize)
            }
        })
        .collect::<Result<_>>()?;
    let basins = basin_discs(map);
    let (nx, ny, flags) = classify_grid(map, window, fine, test, &basins);
    let mut counts = Vec::with_capacity(eps.len());
    for &f in &factors {
        let (cx, cy) = (nx.div_ceil(f), ny.div_ceil(f));
        let mut coarse = vec![false; cx * cy];
        for i in 0..nx {
            for j in 0..ny {
                if flags[i * ny + j] {
                    coarse[(i / f) * cy + j / f] = true;
                }
            }
        }
        counts.push(coarse.iter().filter(|b| **b).count() as u64);
    }
    let finest = *counts.last().expect("nonempty");
    if finest < 100 {
        return Err(LabError::TooFewCells {
            count: finest as usize,
            required: 100,
        });
    }
    let xs: Vec<f64> = eps.iter().map(|e| -e.ln()).collect();
    let ys: Vec<f64> = counts.iter().map(|&c| (c as f64).ln()).collect();
    let (dim, se) = crate::pressure::slope_fit(&xs, &ys);
    let area_fraction = eps
        .iter()
        .zip(&counts)
        .map(|(e, &c)| (c as f64 * e * e / window.area()).min(1.0))
        .collect();
    Ok(DimensionEstimate {
        eps,
        counts,
        area_fraction,
        dim: dim.clamp(0.0, 2.0),
        ci: (dim - 2.0 * se, dim + 2.0 * se),
        test: *test,
    })
}

/// Area fraction of cells passing the return test, each scale classified on its own grid.
pub fn lebesgue_null_check(map: &TranscendentalMap, window: &Window, eps_list: &[f64], test: &ReturnTest) -> Result<Vec<(f64, f64)>> {
    require_hyperbolic_entire(map)?;
    let basins = basin_discs(map);
    Ok(eps_list
        .iter()
        .map(|&eps| {
            let (nx, ny, flags) = classify_grid(map, window, eps, test, &basins);
            let n = flags.iter().filter(|b| **b).count();
            (eps, n as f64 / (nx * ny) as f64)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn koebe_identity_and_scaling() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let c = Complex64::new(5.0, 2.0);
        let reps = koebe_ratio_check(&f, c, 2.0, &[0.25, 0.5, 0.75], &[1], 500, 7).unwrap();
        assert!(reps.iter().all(|r| r.bound_holds), "{reps:?}");
        assert!(reps[2].fitted_c <= reps[0].fitted_c * 81.0);
        let id = koebe_ratio_check(&f, c, 2.0, &[1e-300], &[1], 1, 1).unwrap();
        assert_relative_eq!(id[0].worst_ratio, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn koebe_rejects_disc_over_singular_value() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let err = koebe_ratio_check(&f, Complex64::new(0.5, 0.0), 1.0, &[0.5], &[0], 10, 1).unwrap_err();
        assert!(matches!(err, LabError::BranchUndefined { .. }));
    }

    #[test]
    fn log_branch_modulus_matches_closed_form() {
        // EXP with λ = 1: g(z) = ln|z| + i arg z on the principal sheet
        let f = TranscendentalMap::exp(1.0).unwrap();
        for z in [Complex64::new(150.0, -20.0), Complex64::new(-3e4, 5.0), Complex64::new(0.0, 9e5)] {
            let g = f.preimages(z).unwrap().point(0, 0.0).unwrap();
            let closed = Complex64::new(z.norm().ln(), z.arg());
            assert!((g - closed).norm() <= 1e-10 * closed.norm());
            let gs = (-f.preimages(z).unwrap().log_spherical_derivative(g)).exp();
            let closed_gs = (1.0 + z.norm_sqr()) / (z.norm() * (1.0 + closed.norm_sqr()));
            assert_relative_eq!(gs, closed_gs, max_relative = 1e-10);
        }
    }

    #[test]
    fn tract_checks_hold_for_exp() {
        let f = TranscendentalMap::exp(1.0).unwrap();
        let m = tract_modulus_ratio_check(&f, 10.0, 10.0, 1000, 3).unwrap();
        assert!(m.bound_holds, "{m:?}");
        let d = tract_derivative_ratio_check(&f, 10.0, 10.0, 1000, 3).unwrap();
        assert!(d.bound_holds && d.fitted_c <= 1e3, "{d:?}");
    }

    #[test]
    fn tan_half_plane_tracts() {
        let f = TranscendentalMap::tan(1.0).unwrap();
        let a = Complex64::i();
        let u = Complex64::new(300.0, -40.0);
        let (z, lg) = tract_point(&f, Some(a), u, 0, 2.0).unwrap();
        assert!(z.im > 2.0);
        let fp = -f.derivative(z) / (f.evaluate(z).value - a).powi(2);
        let expect = fp.norm().ln() + (1.0 + z.norm_sqr()).ln() - (1.0 + u.norm_sqr()).ln();
        assert_relative_eq!(-lg, expect, max_relative = 1e-8);
        let m = tract_modulus_ratio_check(&f, 10.0, 10.0, 1000, 3).unwrap();
        let d = tract_derivative_ratio_check(&f, 10.0, 10.0, 1000, 3).unwrap();
        assert!(m.bound_holds && d.bound_holds, "{m:?} {d:?}");
    }

    #[test]
    fn one_step_bound_brute_force() {
        // λ = 1, real z: |k| ≤ 10⁴ terms ((1+|w_k|²)|z|/(1+|z|²))^{-t}, w_k = ln z + 2πik
        let f = TranscendentalMap::exp(1.0).unwrap();
        let cfg = TreeConfig::default();
        for t in [1.0, 2.0] {
            let zs: Vec<Complex64> = [1e2, 1e3, 1e4].iter().map(|&x| Complex64::new(x, 0.0)).collect();
            let rep = one_step_lower_bound_check(&f, t, &zs, 1e2, &cfg).unwrap();
            assert!(rep.report.bound_holds);
            for row in &rep.rows {
                let x = row.z.re;
                let brute: f64 = (-10_000i64..=10_000)
                    .map(|k| {
                        let w2 = x.ln().powi(2) + (std::f64::consts::TAU * k as f64).powi(2);
                        ((1.0 + w2) * x / (1.0 + x * x)).powf(-t)
                    })
                    .sum();
                if t > 1.0 {
                    assert_relative_eq!(row.log_s1, brute.ln(), max_relative = 1e-3);
                } else {
                    assert!(row.log_s1 >= brute.ln() - 1e-9);
                }
                assert!(row.log_ratio.is_finite());
            }
        }
    }

    #[test]
    fn chained_bounds_exp() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let z0 = f.default_start_point().unwrap();
        let cfg = TreeConfig::default();
        let tree = PreimageTree::build(&f, 1.5, z0, 4, &cfg).unwrap();
        let zs = one_step_samples(8.0, 1e6, 300, 5);
        let one = one_step_lower_bound_check(&f, 1.5, &zs, 8.0, &cfg).unwrap();
        assert!(one.report.bound_holds);
        let rep = chained_bound_check(&tree, 3, 3, 8, one.c2).unwrap();
        assert!(rep.annulus.bound_holds, "{:?}", rep.annulus);
        assert!(rep.dyadic.bound_holds, "{:?}", rep.dyadic);
    }

    #[test]
    fn basin_window_is_empty() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let w = Window::new(0.3, 0.7, -0.2, 0.2).unwrap();
        let fr = lebesgue_null_check(&f, &w, &[0.05, 0.025], &ReturnTest::default()).unwrap();
        assert!(fr.iter().all(|(_, a)| *a == 0.0));
        let err = boxcount_nonescaping(&f, &w, &[0.05, 0.025], &ReturnTest::default()).unwrap_err();
        assert!(matches!(err, LabError::TooFewCells { .. }));
    }

    #[test]
    fn non_hyperbolic_is_refused() {
        let f = TranscendentalMap::exp(std::f64::consts::E).unwrap();
        let w = Window::new(0.0, 1.0, 0.0, 1.0).unwrap();
        assert!(matches!(
            boxcount_nonescaping(&f, &w, &[0.5, 0.25], &ReturnTest::default()),
            Err(LabError::NotHyperbolic(_))
        ));
    }
}
