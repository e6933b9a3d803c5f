//! Built-in transcendental map families and their inverse branches.

use std::f64::consts::{FRAC_PI_2, LN_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Relative root tolerance for inverse branches.
pub const EPS_ROOT: f64 = 1e-12;
/// Above this modulus the tangent family switches to the reciprocal chart.
pub const POLE_SWITCH: f64 = 1e8;
pub const DEFAULT_R_ESC: f64 = 1e6;
pub const DEFAULT_R_BND: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Family {
    Exp,
    Sin,
    Tan,
    Zexp,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Exp => "EXP",
            Family::Sin => "SIN",
            Family::Tan => "TAN",
            Family::Zexp => "ZEXP",
        }
    }

    pub fn is_entire(self) -> bool {
        !matches!(self, Family::Tan)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EXP" => Ok(Family::Exp),
            "SIN" => Ok(Family::Sin),
            "TAN" => Ok(Family::Tan),
            "ZEXP" => Ok(Family::Zexp),
            other => Err(LabError::InvalidParameter(format!("unknown family {other:?}"))),
        }
    }
}

/// A point of the Riemann sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub value: Complex64,
    pub at_infinity: bool,
}

impl SphericalPoint {
    pub fn finite(value: Complex64) -> Self {
        Self {
            value,
            at_infinity: false,
        }
    }

    pub fn infinity() -> Self {
        Self {
            value: Complex64::new(f64::INFINITY, 0.0),
            at_infinity: true,
        }
    }

    /// Chordal distance, at most 2.
    pub fn chordal_distance(&self, other: &SphericalPoint) -> f64 {
        match (self.at_infinity, other.at_infinity) {
            (true, true) => 0.0,
            (true, false) => 2.0 / (1.0 + other.value.norm_sqr()).sqrt(),
            (false, true) => 2.0 / (1.0 + self.value.norm_sqr()).sqrt(),
            (false, false) => {
                let a = self.value;
                let b = other.value;
                2.0 * (a - b).norm() / ((1.0 + a.norm_sqr()) * (1.0 + b.norm_sqr())).sqrt()
            }
        }
    }

    /// Geodesic distance for the metric `2|dz|/(1+|z|²)`, at most π.
    pub fn spherical_distance(&self, other: &SphericalPoint) -> f64 {
        2.0 * (0.5 * self.chordal_distance(other)).min(1.0).asin()
    }
}

/// Branch label of a single inverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchIndex(pub i64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum OrbitClass {
    Escaping,
    BoundedReturns,
    HitPole,
    Undecided,
}

/// `ln(1 + r²)` without overflow.
pub fn ln1p_sq(r: f64) -> f64 {
    if r > 1e150 {
        2.0 * r.ln() + (1.0 / (r * r)).ln_1p()
    } else {
        (r * r).ln_1p()
    }
}

/// `ln(1 + e^{2l})` without overflow.
pub fn ln1p_exp2(l: f64) -> f64 {
    let x = 2.0 * l;
    if x > 40.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn ln_sin_abs(z: Complex64) -> f64 {
    let y = z.im.abs();
    if y < 20.0 {
        z.sin().norm().ln()
    } else {
        let e = (-2.0 * y).exp();
        y - LN_2 + 0.5 * (1.0 - 2.0 * (2.0 * z.re).cos() * e + e * e).ln()
    }
}

fn ln_cos_abs(z: Complex64) -> f64 {
    let y = z.im.abs();
    if y < 20.0 {
        z.cos().norm().ln()
    } else {
        let e = (-2.0 * y).exp();
        y - LN_2 + 0.5 * (1.0 + 2.0 * (2.0 * z.re).cos() * e + e * e).ln()
    }
}

/// `tan z` that stays finite for large `|Im z|`.
pub fn tan_stable(z: Complex64) -> Complex64 {
    if z.im >= 0.0 {
        let q = (2.0 * I * z).exp();
        I * (1.0 - q) / (1.0 + q)
    } else {
        let q = (-2.0 * I * z).exp();
        -I * (1.0 - q) / (1.0 + q)
    }
}

fn nearest_tan_pole(z: Complex64) -> Complex64 {
    let m = ((z.re - FRAC_PI_2) / PI).round();
    Complex64::new(FRAC_PI_2 + m * PI, 0.0)
}

fn reduce_half_strip(a: Complex64, reflect: bool) -> Complex64 {
    let n = (a.re / PI).round();
    if n == 0.0 {
        return a;
    }
    if reflect && (n as i64).rem_euclid(2) == 1 {
        n * PI - a
    } else {
        a - n * PI
    }
}

/// A solution of `sin a = u` with `Re a ∈ [-π/2, π/2]`.
pub fn asin_stable(u: Complex64) -> Complex64 {
    let s = if u.norm() > 1e8 {
        I * u * (1.0 - 1.0 / (u * u)).sqrt()
    } else {
        (1.0 - u * u).sqrt()
    };
    let p = I * u + s;
    let m = s - I * u;
    let a = if p.norm() >= m.norm() {
        -I * p.ln()
    } else {
        I * m.ln()
    };
    // sin(nπ - a) = sin a for odd n, sin(a - nπ) = sin a for even n
    reduce_half_strip(a, true)
}

/// A solution of `tan a = u` with `Re a ∈ (-π/2, π/2]`.
pub fn atan_stable(u: Complex64) -> Complex64 {
    let a = if u.norm() <= 1.0 {
        0.5 * I * ((1.0 - I * u).ln() - (1.0 + I * u).ln())
    } else {
        let v = 1.0 / u;
        FRAC_PI_2 - 0.5 * I * ((1.0 - I * v).ln() - (1.0 + I * v).ln())
    };
    let mut a = reduce_half_strip(a, false);
    if a.re <= -FRAC_PI_2 {
        a += PI;
    }
    a
}

/// `atan(i + δ)` for small `δ`, avoiding the cancellation in `1 + i(i + δ)`.
pub fn atan_near_i(delta: Complex64) -> Complex64 {
    0.5 * I * ((2.0 - I * delta).ln() - (I * delta).ln())
}

/// One of the built-in families with its parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranscendentalMap {
    family: Family,
    lambda: Complex64,
}

impl TranscendentalMap {
    pub fn new(family: Family, lambda: Complex64) -> Result<Self> {
        if !lambda.re.is_finite() || !lambda.im.is_finite() {
            return Err(LabError::InvalidParameter("lambda must be finite".into()));
        }
        if family != Family::Zexp && lambda == Complex64::new(0.0, 0.0) {
            return Err(LabError::InvalidParameter(format!(
                "lambda must be nonzero for {family}"
            )));
        }
        let lambda = if family == Family::Zexp {
            Complex64::new(1.0, 0.0)
        } else {
            lambda
        };
        Ok(Self { family, lambda })
    }

    pub fn exp(lambda: f64) -> Result<Self> {
        Self::new(Family::Exp, Complex64::new(lambda, 0.0))
    }

    pub fn sin(lambda: f64) -> Result<Self> {
        Self::new(Family::Sin, Complex64::new(lambda, 0.0))
    }

    pub fn tan(lambda: f64) -> Result<Self> {
        Self::new(Family::Tan, Complex64::new(lambda, 0.0))
    }

    pub fn zexp() -> Self {
        Self {
            family: Family::Zexp,
            lambda: Complex64::new(1.0, 0.0),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn lambda(&self) -> Complex64 {
        self.lambda
    }

    pub fn singular_values(&self) -> Vec<Complex64> {
        let l = self.lambda;
        match self.family {
            Family::Exp => vec![Complex64::new(0.0, 0.0)],
            Family::Sin => vec![l, -l],
            Family::Tan => vec![I * l, -I * l],
            Family::Zexp => vec![Complex64::new(0.0, 0.0), Complex64::new(-(-1f64).exp(), 0.0)],
        }
    }

    /// Values with no preimage at all.
    pub fn omitted_values(&self) -> Vec<Complex64> {
        match self.family {
            Family::Exp => vec![Complex64::new(0.0, 0.0)],
            Family::Tan => vec![I * self.lambda, -I * self.lambda],
            Family::Sin | Family::Zexp => Vec::new(),
        }
    }

    pub fn is_pole(&self, z: Complex64) -> bool {
        if self.family != Family::Tan {
            return false;
        }
        let p = nearest_tan_pole(z);
        (z - p).norm() <= 4.0 * f64::EPSILON * p.re.abs().max(1.0)
    }

    pub fn evaluate(&self, z: Complex64) -> SphericalPoint {
        let w = match self.family {
            Family::Exp => self.lambda * z.exp(),
            Family::Sin => self.lambda * z.sin(),
            Family::Tan => {
                if self.is_pole(z) {
                    return SphericalPoint::infinity();
                }
                self.lambda * tan_stable(z)
            }
            Family::Zexp => z * z.exp(),
        };
        if w.re.is_finite() && w.im.is_finite() {
            SphericalPoint::finite(w)
        } else {
            SphericalPoint::infinity()
        }
    }

    pub fn derivative(&self, z: Complex64) -> Complex64 {
        match self.family {
            Family::Exp => self.lambda * z.exp(),
            Family::Sin => self.lambda * z.cos(),
            Family::Tan => {
                let t = tan_stable(z);
                self.lambda * (1.0 + t * t)
            }
            Family::Zexp => (1.0 + z) * z.exp(),
        }
    }

    pub fn second_derivative(&self, z: Complex64) -> Complex64 {
        match self.family {
            Family::Exp => self.lambda * z.exp(),
            Family::Sin => -self.lambda * z.sin(),
            Family::Tan => {
                let t = tan_stable(z);
                2.0 * self.lambda * t * (1.0 + t * t)
            }
            Family::Zexp => (2.0 + z) * z.exp(),
        }
    }

    /// `(ln|f(z)|, ln|f'(z)|)` without forming `f` where it may overflow.
    fn log_moduli(&self, z: Complex64) -> (f64, f64) {
        let ll = self.lambda.norm().ln();
        match self.family {
            Family::Exp => (ll + z.re, ll + z.re),
            Family::Sin => (ll + ln_sin_abs(z), ll + ln_cos_abs(z)),
            Family::Tan => {
                let t = tan_stable(z);
                (ll + t.norm().ln(), ll + (1.0 + t * t).norm().ln())
            }
            Family::Zexp => (z.norm().ln() + z.re, (1.0 + z).norm().ln() + z.re),
        }
    }

    /// `ln f*(z)`; `-inf` at critical points.
    pub fn log_spherical_derivative(&self, z: Complex64) -> f64 {
        let lz = ln1p_sq(z.norm());
        if self.family == Family::Tan && (self.is_pole(z) || (self.lambda * tan_stable(z)).norm() > POLE_SWITCH) {
            // reciprocal chart: 1/f = cot(z)/λ, (1/f)' = -(1 + cot²z)/λ
            let c = -tan_stable(z - FRAC_PI_2);
            let g = c / self.lambda;
            let dg = (1.0 + c * c) / self.lambda;
            return lz + dg.norm().ln() - ln1p_sq(g.norm());
        }
        let (lf, lfp) = self.log_moduli(z);
        lz + lfp - ln1p_exp2(lf)
    }

    pub fn spherical_derivative(&self, z: Complex64) -> f64 {
        self.log_spherical_derivative(z).exp()
    }

    /// Sheet data for the preimages of `w`.
    pub fn preimages(&self, w: Complex64) -> Result<Preimages> {
        Preimages::new(self, w)
    }

    /// All preimages with branch index `|j| ≤ k_max`, ordered by index.
    pub fn inverse_branches(&self, w: Complex64, k_max: u64) -> Result<Vec<(BranchIndex, Complex64)>> {
        let pre = self.preimages(w)?;
        if pre.is_single() {
            return Ok(vec![(BranchIndex(0), Complex64::new(0.0, 0.0))]);
        }
        let k = k_max as i64;
        (-k..=k)
            .map(|j| pre.branch(j).map(|z| (BranchIndex(j), z)))
            .collect()
    }

    /// The preimage of `w` closest to `target`.
    pub fn preimage_near(&self, w: Complex64, target: Complex64) -> Result<(BranchIndex, Complex64)> {
        let pre = self.preimages(w)?;
        pre.nearest(target)
    }

    /// Branch index of `z` as a preimage of `f(z)`.
    pub fn sheet_of(&self, z: Complex64) -> Result<BranchIndex> {
        let w = self.evaluate(z);
        if w.at_infinity {
            return Err(LabError::InvalidParameter(format!("{z} maps to infinity")));
        }
        Ok(self.preimage_near(w.value, z)?.0)
    }

    pub fn iterate(&self, z: Complex64, n: usize) -> SphericalPoint {
        let mut p = SphericalPoint::finite(z);
        for _ in 0..n {
            if p.at_infinity {
                break;
            }
            p = self.evaluate(p.value);
        }
        p
    }

    pub fn classify_orbit(&self, z: Complex64, max_iter: usize, r_esc: f64, r_bnd: f64) -> OrbitClass {
        assert!(max_iter >= 1 && r_esc > r_bnd && r_bnd > 0.0);
        let quarter = (max_iter / 4).max(1);
        let mut mods = Vec::with_capacity(max_iter);
        let mut cur = z;
        for _ in 0..max_iter {
            if self.is_pole(cur) {
                return OrbitClass::HitPole;
            }
            let p = self.evaluate(cur);
            if p.at_infinity {
                // entire maps only overflow after exceeding any escape radius
                return OrbitClass::Escaping;
            }
            cur = p.value;
            mods.push(cur.norm());
        }
        let tail = &mods[mods.len() - quarter..];
        if tail.iter().all(|&m| m > r_esc) && tail.windows(2).all(|w| w[1] >= w[0]) {
            OrbitClass::Escaping
        } else if tail.iter().any(|&m| m < r_bnd) {
            OrbitClass::BoundedReturns
        } else {
            OrbitClass::Undecided
        }
    }

    /// `(fᵖ(z), (fᵖ)'(z))`, or `None` if the orbit leaves ℂ.
    pub fn iterate_with_derivative(&self, z: Complex64, p: usize) -> Option<(Complex64, Complex64)> {
        let mut cur = z;
        let mut d = Complex64::new(1.0, 0.0);
        for _ in 0..p {
            let e = self.evaluate(cur);
            if e.at_infinity {
                return None;
            }
            d *= self.derivative(cur);
            cur = e.value;
        }
        if d.re.is_finite() && d.im.is_finite() {
            Some((cur, d))
        } else {
            None
        }
    }

    fn newton_periodic(&self, seed: Complex64, period: usize) -> Option<Complex64> {
        let mut z = seed;
        for _ in 0..100 {
            let (fz, d) = self.iterate_with_derivative(z, period)?;
            let den = d - 1.0;
            if den.norm() == 0.0 {
                return None;
            }
            let step = (fz - z) / den;
            let step = if step.norm() > 2.0 { step * (2.0 / step.norm()) } else { step };
            z -= step;
            if !z.re.is_finite() || !z.im.is_finite() {
                return None;
            }
            if step.norm() <= 1e-14 * (1.0 + z.norm()) {
                let (fz, _) = self.iterate_with_derivative(z, period)?;
                return ((fz - z).norm() <= 1e-9 * (1.0 + z.norm())).then_some(z);
            }
        }
        None
    }

    /// Repelling periodic points of exact period `period` reached by Newton from a seed grid.
    ///
    /// Sorted by modulus, then by imaginary part.
    pub fn repelling_periodic_points(&self, period: usize, half_width: f64, step: f64) -> Vec<Complex64> {
        assert!(period >= 1 && step > 0.0);
        let n = (half_width / step).floor() as i64;
        let mut found: Vec<Complex64> = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                let seed = Complex64::new(i as f64 * step + 0.013, j as f64 * step + 0.007);
                let Some(z) = self.newton_periodic(seed, period) else { continue };
                let Some((_, d)) = self.iterate_with_derivative(z, period) else { continue };
                if d.norm() <= 1.0 + 1e-9 {
                    continue;
                }
                let minimal = (1..period)
                    .filter(|q| period.is_multiple_of(*q))
                    .all(|q| match self.iterate_with_derivative(z, q) {
                        Some((fz, _)) => (fz - z).norm() > 1e-7 * (1.0 + z.norm()),
                        None => true,
                    });
                if minimal && found.iter().all(|f| (f - z).norm() > 1e-8 * (1.0 + z.norm())) {
                    found.push(z);
                }
            }
        }
        found.sort_by(|a, b| {
            a.norm()
                .total_cmp(&b.norm())
                .then(a.im.total_cmp(&b.im))
        });
        found
    }

    /// Repelling fixed point of smallest modulus; the default pressure starting point.
    pub fn default_start_point(&self) -> Result<Complex64> {
        self.repelling_periodic_points(1, 6.0, 0.5)
            .into_iter()
            .next()
            .ok_or_else(|| LabError::InvalidParameter("no repelling fixed point found".into()))
    }

    /// Round-trip tolerance for a preimage `z` of `w`.
    ///
    /// Adds the error from rounding `z` itself, `|f'(z)|·|z|·ε`, which dominates
    /// near far tangent poles and on far `z eᶻ` sheets.
    pub fn root_tolerance(&self, w: Complex64, z: Complex64) -> f64 {
        EPS_ROOT * (1.0 + w.norm()) + 8.0 * f64::EPSILON * z.norm() * self.derivative(z).norm()
    }

    /// Largest radius on which `f` is certified injective around `center`.
    ///
    /// Uses `r · sup_{D(c,r)} |f''| ≤ |f'(c)| / 2`, with the supremum taken on the boundary circle.
    pub fn injectivity_radius(&self, center: Complex64) -> f64 {
        let d = self.derivative(center).norm();
        if d == 0.0 || !d.is_finite() {
            return 0.0;
        }
        let mut hi = 1.0;
        if self.family == Family::Tan {
            hi = f64::min(hi, 0.5 * (center - nearest_tan_pole(center)).norm());
        }
        let ok = |r: f64| {
            let m = (0..128)
                .map(|i| {
                    let z = center + Complex64::from_polar(r, TAU * i as f64 / 128.0);
                    self.second_derivative(z).norm()
                })
                .fold(0.0f64, f64::max)
                * 1.25;
            r * m <= 0.5 * d
        };
        if ok(hi) {
            return hi;
        }
        let mut lo = 0.0;
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn singular_orbit_report(&self, max_iter: usize) -> SingularOrbitReport {
        let mut entries = Vec::new();
        let mut cycles: Vec<AttractingCycle> = Vec::new();
        let mut radius = 0.0f64;
        let mut orbit_points = Vec::new();
        for v in self.singular_values() {
            let mut entry = SingularOrbitEntry {
                value: v,
                fixed: false,
                period: None,
                multiplier: None,
                escaped: false,
            };
            let fv = self.evaluate(v);
            if !fv.at_infinity && fv.value == v {
                entry.fixed = true;
                entry.period = Some(1);
                entry.multiplier = Some(self.derivative(v).norm());
                orbit_points.push(v);
                entries.push(entry);
                continue;
            }
            let mut z = v;
            for _ in 0..max_iter {
                let p = self.evaluate(z);
                if p.at_infinity || p.value.norm() > DEFAULT_R_ESC {
                    entry.escaped = true;
                    break;
                }
                z = p.value;
                radius = radius.max(z.norm());
                orbit_points.push(z);
            }
            if !entry.escaped {
                for period in 1..=12 {
                    let Some((fz, _)) = self.iterate_with_derivative(z, period) else { break };
                    if (fz - z).norm() < 1e-9 * (1.0 + z.norm()) {
                        let zc = self.newton_periodic(z, period).unwrap_or(z);
                        let mult = self
                            .iterate_with_derivative(zc, period)
                            .map(|(_, d)| d.norm())
                            .unwrap_or(f64::INFINITY);
                        entry.period = Some(period);
                        entry.multiplier = Some(mult);
                        if mult < 1.0 - 1e-6 && cycles.iter().all(|c| (c.point - zc).norm() > 1e-8) {
                            cycles.push(AttractingCycle {
                                point: zc,
                                period,
                                multiplier: mult,
                            });
                        }
                        break;
                    }
                }
            }
            entries.push(entry);
        }
        let hyperbolic = entries
            .iter()
            .all(|e| !e.escaped && e.multiplier.is_some_and(|m| m < 1.0 - 1e-6));
        let julia = self.repelling_periodic_points(1, 6.0, 0.5);
        let julia_distance = orbit_points
            .iter()
            .flat_map(|p| julia.iter().map(move |q| (p - q).norm()))
            .fold(None, |acc: Option<f64>, d| Some(acc.map_or(d, |a| a.min(d))));
        SingularOrbitReport {
            hyperbolic,
            entries,
            cycles,
            postsingular_radius: radius,
            julia_distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularOrbitEntry {
    pub value: Complex64,
    /// The singular value is itself a fixed point.
    pub fixed: bool,
    pub period: Option<usize>,
    pub multiplier: Option<f64>,
    pub escaped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttractingCycle {
    pub point: Complex64,
    pub period: usize,
    pub multiplier: f64,
}

/// Hyperbolicity evidence from the forward orbits of the singular values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularOrbitReport {
    pub hyperbolic: bool,
    pub entries: Vec<SingularOrbitEntry>,
    pub cycles: Vec<AttractingCycle>,
    pub postsingular_radius: f64,
    /// Distance from the post-singular orbits to the repelling fixed points found.
    pub julia_distance: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Sheets {
    /// `z = base[p] + k·step` for `p < count`.
    Linear {
        base: [Complex64; 2],
        count: usize,
        step: Complex64,
    },
    /// Solutions of `z + Log z = Log w + 2πik`.
    Lambert { log_w: Complex64 },
    /// `f⁻¹(0) = {0}` for `z eᶻ`.
    Origin,
}

/// Preimage sheets of a fixed value `w`.
///
/// Sheets are indexed by a family `p` and a real parameter `k`; integer `k`
/// gives actual preimages, and non-integer `k` interpolates along the sheet
/// curve, which the tree uses to integrate over runs of far sheets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preimages {
    family: Family,
    w: Complex64,
    sheets: Sheets,
    /// `ln|f'|` on every sheet (EXP/SIN/TAN), or `ln|w|` for ZEXP.
    log_fprime: f64,
    log1p_w: f64,
}

impl Preimages {
    fn new(map: &TranscendentalMap, w: Complex64) -> Result<Self> {
        if !w.re.is_finite() || !w.im.is_finite() {
            return Err(LabError::InvalidParameter(format!("preimage of non-finite value {w}")));
        }
        let l = map.lambda;
        let zero = Complex64::new(0.0, 0.0);
        let (sheets, log_fprime) = match map.family {
            Family::Exp => {
                if w == zero {
                    return Err(LabError::OmittedValue { value: w });
                }
                let base = (w / l).ln();
                (
                    Sheets::Linear {
                        base: [base, base],
                        count: 1,
                        step: Complex64::new(0.0, TAU),
                    },
                    w.norm().ln(),
                )
            }
            Family::Sin => {
                if w == l || w == -l {
                    return Err(LabError::CriticalValue { value: w });
                }
                let a = asin_stable(w / l);
                (
                    Sheets::Linear {
                        base: [a, PI - a],
                        count: 2,
                        step: Complex64::new(TAU, 0.0),
                    },
                    0.5 * ((l - w).norm().ln() + (l + w).norm().ln()),
                )
            }
            Family::Tan => {
                let u = w / l;
                if u == I || u == -I {
                    return Err(LabError::OmittedValue { value: w });
                }
                let a = atan_stable(u);
                (
                    Sheets::Linear {
                        base: [a, a],
                        count: 1,
                        step: Complex64::new(PI, 0.0),
                    },
                    (w + I * l).norm().ln() + (w - I * l).norm().ln() - l.norm().ln(),
                )
            }
            Family::Zexp => {
                if w == zero {
                    (Sheets::Origin, f64::NEG_INFINITY)
                } else {
                    if (w + (-1f64).exp()).norm() <= 1e-15 {
                        return Err(LabError::CriticalValue { value: w });
                    }
                    (Sheets::Lambert { log_w: w.ln() }, w.norm().ln())
                }
            }
        };
        Ok(Self {
            family: map.family,
            w,
            sheets,
            log_fprime,
            log1p_w: ln1p_sq(w.norm()),
        })
    }

    pub fn value(&self) -> Complex64 {
        self.w
    }

    /// True when `w` has a single preimage (`0` for `z eᶻ`).
    pub fn is_single(&self) -> bool {
        matches!(self.sheets, Sheets::Origin)
    }

    /// Number of sheet families (2 for SIN, else 1).
    pub fn families(&self) -> usize {
        match self.sheets {
            Sheets::Linear { count, .. } => count,
            _ => 1,
        }
    }

    /// Sheet step in modulus per unit of `k`, used to size far-sheet bins.
    pub fn step_len(&self) -> f64 {
        match self.sheets {
            Sheets::Linear { step, .. } => step.norm(),
            _ => TAU,
        }
    }

    /// Maps a branch index to `(family, k)`.
    pub fn split_index(&self, j: i64) -> (usize, i64) {
        if self.families() == 2 {
            let p = j.rem_euclid(2);
            (p as usize, (j - p) / 2)
        } else {
            (0, j)
        }
    }

    pub fn join_index(&self, p: usize, k: i64) -> i64 {
        if self.families() == 2 {
            2 * k + p as i64
        } else {
            k
        }
    }

    /// Point on sheet family `p` at real parameter `k`.
    pub fn point(&self, p: usize, k: f64) -> Result<Complex64> {
        match self.sheets {
            Sheets::Linear { base, step, .. } => Ok(base[p] + k * step),
            Sheets::Origin => Ok(Complex64::new(0.0, 0.0)),
            Sheets::Lambert { log_w } => lambert_sheet(self.w, log_w, k),
        }
    }

    /// The preimage with branch index `j`.
    pub fn branch(&self, j: i64) -> Result<Complex64> {
        if self.is_single() {
            return Ok(Complex64::new(0.0, 0.0));
        }
        let (p, k) = self.split_index(j);
        self.point(p, k as f64)
    }

    /// `ln f*(z)` for a point `z` on one of the sheets of `w`.
    pub fn log_spherical_derivative(&self, z: Complex64) -> f64 {
        let lfp = match self.family {
            Family::Zexp => {
                if self.is_single() {
                    return 0.0;
                }
                self.log_fprime + (1.0 + z).norm().ln() - z.norm().ln()
            }
            _ => self.log_fprime,
        };
        ln1p_sq(z.norm()) + lfp - self.log1p_w
    }

    /// Real interval of `k` on family `p` whose sheet points lie in `|z| < r`.
    pub fn disc_interval(&self, p: usize, r: f64) -> Option<(f64, f64)> {
        match self.sheets {
            Sheets::Origin => (r > 0.0).then_some((0.0, 0.0)),
            Sheets::Linear { base, step, .. } => {
                // |b + k s|² < r²
                let b = base[p];
                let a2 = step.norm_sqr();
                let a1 = (b * step.conj()).re;
                let a0 = b.norm_sqr() - r * r;
                let disc = a1 * a1 - a2 * a0;
                if disc <= 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                Some(((-a1 - sq) / a2, (-a1 + sq) / a2))
            }
            Sheets::Lambert { .. } => {
                let inside = |k: f64| self.point(0, k).map(|z| z.norm() < r).unwrap_or(false);
                // |z_k| ≈ 2π|k| beyond the first few sheets
                let mut lo_k = None;
                for k in -2..=2 {
                    if inside(k as f64) {
                        lo_k = Some(k as f64);
                        break;
                    }
                }
                let start = lo_k?;
                let edge = |dir: f64| {
                    let mut a = start;
                    let mut b = start + dir * (r / TAU + 4.0);
                    while inside(b) {
                        b += dir * (r / TAU + 4.0);
                    }
                    for _ in 0..60 {
                        let m = 0.5 * (a + b);
                        if inside(m) {
                            a = m;
                        } else {
                            b = m;
                        }
                    }
                    a
                };
                Some((edge(-1.0), edge(1.0)))
            }
        }
    }

    /// Nearest preimage to `target`.
    pub fn nearest(&self, target: Complex64) -> Result<(BranchIndex, Complex64)> {
        if self.is_single() {
            return Ok((BranchIndex(0), Complex64::new(0.0, 0.0)));
        }
        let mut best: Option<(f64, i64, Complex64)> = None;
        let mut consider = |j: i64, z: Complex64| {
            let d = (z - target).norm();
            if best.is_none_or(|(bd, bj, _)| d < bd || (d == bd && j < bj)) {
                best = Some((d, j, z));
            }
        };
        match self.sheets {
            Sheets::Linear { base, step, count } => {
                for (p, b) in base.iter().enumerate().take(count) {
                    let k0 = ((target - b) * step.conj()).re / step.norm_sqr();
                    let k0 = k0.round() as i64;
                    for k in k0 - 1..=k0 + 1 {
                        let j = self.join_index(p, k);
                        consider(j, b + k as f64 * step);
                    }
                }
            }
            Sheets::Lambert { log_w } => {
                let guess = if target.norm() > 0.0 {
                    ((target + sheet_log(target) - log_w).im / TAU).round() as i64
                } else {
                    0
                };
                for k in guess - 2..=guess + 2 {
                    if let Ok(z) = self.branch(k) {
                        consider(k, z);
                    }
                }
            }
            Sheets::Origin => unreachable!(),
        }
        let (_, j, z) = best.expect("at least one candidate sheet");
        Ok((BranchIndex(j), z))
    }
}

/// Log used for sheet labels of `z eᶻ`: the real root below `-1` takes
/// `arg = -π`, matching the usual labelling of the real Lambert branches.
fn sheet_log(z: Complex64) -> Complex64 {
    let l = z.ln();
    if z.im == 0.0 && z.re < -1.0 {
        Complex64::new(l.re, -PI)
    } else {
        l
    }
}

fn lambert_newton(target: Complex64, seed: Complex64) -> Option<Complex64> {
    let mut z = seed;
    if z.norm() == 0.0 {
        return None;
    }
    for _ in 0..80 {
        let h = z + sheet_log(z) - target;
        let step = h / (1.0 + 1.0 / z);
        let mut next = z - step;
        // keep the iterate off the origin and the negative-axis cut region
        if next.norm() < 0.25 * z.norm() {
            next = z - step * (0.75 * z.norm() / step.norm());
        }
        if !next.re.is_finite() || !next.im.is_finite() {
            return None;
        }
        let done = (next - z).norm() <= 4.0 * f64::EPSILON * next.norm();
        z = next;
        if done {
            break;
        }
    }
    let h = z + sheet_log(z) - target;
    (h.norm() <= EPS_ROOT * (1.0 + target.norm())).then_some(z)
}

fn lambert_sheet(w: Complex64, log_w: Complex64, k: f64) -> Result<Complex64> {
    let target = log_w + Complex64::new(0.0, TAU * k);
    let is_int = k.fract() == 0.0;
    let mut seeds = Vec::with_capacity(5);
    if target.norm() > 1e-3 {
        seeds.push(target - target.ln());
    }
    if k == 0.0 {
        seeds.push(w);
        seeds.push((1.0 + w).ln());
        let p = (2.0 * (1.0 + std::f64::consts::E * w)).sqrt();
        seeds.push(-1.0 + p - p * p / 3.0);
    }
    if k.abs() <= 1.0 {
        let p = (2.0 * (1.0 + std::f64::consts::E * w)).sqrt();
        seeds.push(-1.0 - p);
        seeds.push(target - target.ln() + Complex64::new(0.0, 0.5));
    }
    for seed in seeds {
        let Some(z) = lambert_newton(target, seed) else { continue };
        if is_int {
            // the principal log picks the sheet; reject a root found on a neighbouring one
            let j = ((z + sheet_log(z) - log_w).im / TAU).round();
            if j != k {
                continue;
            }
        }
        return Ok(z);
    }
    Err(LabError::NonConvergence {
        value: w,
        sheet: k as i64,
    })
}
