//! Discrete Patterson–Sullivan measures on backward orbits.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::logsum::LogSum;
use crate::maps::{ln1p_sq, TranscendentalMap};
use crate::tree::{PreimageTree, TreeConfig};

/// Weights `bₙ` multiplying the depth-`n` layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "rule", content = "beta")]
pub enum BSequence {
    #[default]
    ConstantOne,
    /// `bₙ = n^β`, with `b₀ = 1`.
    Poly(f64),
}

impl BSequence {
    pub fn log_b(&self, n: usize) -> f64 {
        match *self {
            BSequence::ConstantOne => 0.0,
            BSequence::Poly(beta) => beta * (n.max(1) as f64).ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub z: Complex64,
    pub weight: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureParams {
    pub t: f64,
    pub s: f64,
    pub depth: usize,
    pub b: BSequence,
    pub z0: Complex64,
    pub config: Option<TreeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<Atom>,
    pub params: MeasureParams,
    /// `ln Σ_s`.
    pub log_normalizer: f64,
    /// `ln` of the unnormalized layer sums for depths `1..=N`.
    pub layer_log_sums: Vec<f64>,
}

impl AtomicMeasure {
    /// Unit point mass at `z`.
    pub fn dirac(z: Complex64, t: f64) -> Self {
        Self {
            atoms: vec![Atom { z, weight: 1.0, depth: 0 }],
            params: MeasureParams {
                t,
                s: 0.0,
                depth: 0,
                b: BSequence::ConstantOne,
                z0: z,
                config: None,
            },
            log_normalizer: 0.0,
            layer_log_sums: vec![0.0],
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// `∫ φ dμ`.
    pub fn integrate(&self, phi: impl Fn(Complex64) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * phi(a.z)).sum()
    }

    pub fn mass_in_disc(&self, center: Complex64, radius: f64) -> f64 {
        self.integrate(|z| if (z - center).norm() < radius { 1.0 } else { 0.0 })
    }

    pub fn layer_mass(&self, n: usize) -> f64 {
        self.atoms.iter().filter(|a| a.depth == n).map(|a| a.weight).sum()
    }

    /// Measure with density `exp(log_eta)` against `self`, renormalized.
    pub fn reweight_metric(&self, log_eta: impl Fn(Complex64) -> f64) -> Result<AtomicMeasure> {
        let etas: Vec<f64> = self.atoms.iter().map(|a| log_eta(a.z).exp()).collect();
        let m: f64 = self.atoms.iter().zip(&etas).map(|(a, e)| a.weight * e).sum();
        if !m.is_finite() || etas.iter().any(|e| !e.is_finite()) {
            return Err(LabError::InfiniteMass);
        }
        if !(m > 0.0) {
            return Err(LabError::DegenerateNormalizer);
        }
        let mut out = self.clone();
        for (a, e) in out.atoms.iter_mut().zip(&etas) {
            a.weight *= e / m;
        }
        out.atoms.retain(|a| a.weight > 0.0);
        Ok(out)
    }
}

/// `ln η` for the change from the spherical to the Euclidean metric.
pub fn spherical_to_euclidean(t: f64) -> impl Fn(Complex64) -> f64 {
    move |z: Complex64| t * (ln1p_sq(z.norm()) - std::f64::consts::LN_2)
}

/// Depth-`n` backward orbit endpoints of `z0` with weights `|(fⁿ)*(w)|^{-t}`, `1 ≤ n ≤ N`.
///
/// Layer `n` holds the unmerged children of the depth-`(n-1)` tree nodes, so
/// every atom is an exact preimage of an atom one layer up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardLayers {
    pub t: f64,
    pub z0: Complex64,
    pub config: TreeConfig,
    pub layers: Vec<Vec<(Complex64, f64)>>,
}

/// Children lighter than this fraction of the heaviest in their layer are dropped.
pub const MIN_RELATIVE_WEIGHT: f64 = 1e-6;

impl BackwardLayers {
    /// Layers `1..=tree.depth()`.
    pub fn from_tree(tree: &PreimageTree) -> Result<Self> {
        let layers = (0..tree.depth())
            .map(|d| tree.raw_children(d, MIN_RELATIVE_WEIGHT))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            t: tree.t,
            z0: tree.z0,
            config: tree.config,
            layers,
        })
    }

    pub fn build(map: &TranscendentalMap, t: f64, z0: Complex64, depth: usize, cfg: &TreeConfig) -> Result<Self> {
        if depth == 0 {
            return Err(LabError::InvalidParameter("measure depth must be at least 1".into()));
        }
        Self::from_tree(&PreimageTree::build(map, t, z0, depth, cfg)?)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `ln` of the depth-`n` layer sum, `1 ≤ n ≤ depth`.
    pub fn layer_log_sum(&self, n: usize) -> f64 {
        self.layers[n - 1].iter().map(|c| c.1).collect::<LogSum>().value()
    }

    /// Patterson–Sullivan measure `μ_s`.
    pub fn measure(&self, s: f64, b: BSequence) -> Result<AtomicMeasure> {
        if !(s > 0.0) {
            return Err(LabError::InvalidParameter(format!("s must be positive, got {s}")));
        }
        let layer_log_sums: Vec<f64> = (1..=self.depth()).map(|n| self.layer_log_sum(n)).collect();
        let shift = |n: usize| b.log_b(n) - n as f64 * s;
        let log_normalizer = layer_log_sums
            .iter()
            .enumerate()
            .map(|(i, l)| l + shift(i + 1))
            .collect::<LogSum>()
            .value();
        if !log_normalizer.is_finite() {
            return Err(LabError::DegenerateNormalizer);
        }
        let atoms = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, layer)| {
                let n = i + 1;
                layer.iter().map(move |&(z, lw)| Atom {
                    z,
                    weight: (lw + shift(n) - log_normalizer).exp(),
                    depth: n,
                })
            })
            .filter(|a| a.weight > 0.0)
            .collect();
        Ok(AtomicMeasure {
            atoms,
            params: MeasureParams {
                t: self.t,
                s,
                depth: self.depth(),
                b,
                z0: self.z0,
                config: Some(self.config),
            },
            log_normalizer,
            layer_log_sums,
        })
    }
}

pub fn build_patterson_sullivan(
    map: &TranscendentalMap,
    t: f64,
    s: f64,
    z0: Complex64,
    b: BSequence,
    depth: usize,
    cfg: &TreeConfig,
) -> Result<AtomicMeasure> {
    BackwardLayers::build(map, t, z0, depth, cfg)?.measure(s, b)
}

/// Metric in which conformality is tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Spherical,
    Euclidean,
}

impl Metric {
    pub fn log_derivative(&self, map: &TranscendentalMap, z: Complex64) -> f64 {
        match self {
            Metric::Spherical => map.log_spherical_derivative(z),
            Metric::Euclidean => map.derivative(z).norm().ln(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestDisc {
    pub center: Complex64,
    pub radius: f64,
}

impl TestDisc {
    pub fn new(center: Complex64, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn contains(&self, z: Complex64) -> bool {
        (z - self.center).norm() < self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub disc: TestDisc,
    /// `∫_A |f'|^t dμ` in the chosen metric.
    pub lhs: f64,
    /// `μ(f(A))`.
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalityReport {
    pub rows: Vec<ResidualRow>,
    pub max: f64,
}

/// Discs of injectivity radius (capped at `max_radius`) around the given centers.
pub fn injective_panel(map: &TranscendentalMap, centers: &[Complex64], max_radius: f64) -> Vec<TestDisc> {
    centers
        .iter()
        .map(|&c| TestDisc::new(c, map.injectivity_radius(c).min(max_radius)))
        .collect()
}

/// A disc containing `f(A)`, from `|f'|` sampled on the boundary of `A`.
fn image_bound(map: &TranscendentalMap, disc: &TestDisc) -> Option<TestDisc> {
    let w = map.evaluate(disc.center);
    if w.at_infinity {
        return None;
    }
    let m = (0..64)
        .map(|i| {
            let th = i as f64 * std::f64::consts::TAU / 64.0;
            map.derivative(disc.center + Complex64::from_polar(disc.radius, th)).norm()
        })
        .fold(0.0, f64::max);
    m.is_finite().then(|| TestDisc::new(w.value, 1.1 * disc.radius * m))
}

/// `|∫_A |f'|^t dμ − μ(f(A))|` for each disc `A` of the panel.
///
/// An atom `w` lies in `f(A)` when the inverse branch nearest to the center
/// of `A` maps `w` into `A`.
pub fn conformality_residual(
    measure: &AtomicMeasure,
    map: &TranscendentalMap,
    panel: &[TestDisc],
    metric: Metric,
) -> Result<ConformalityReport> {
    let t = measure.params.t;
    let mut rows = Vec::with_capacity(panel.len());
    for disc in panel {
        let safe = map.injectivity_radius(disc.center);
        if !(disc.radius > 0.0 && disc.radius <= safe) || map.derivative(disc.center).norm() == 0.0 {
            return Err(LabError::NonInjectiveTestSet {
                center: disc.center,
                radius: disc.radius,
            });
        }
        let image = image_bound(map, disc);
        let mut lhs = 0.0;
        let mut rhs = 0.0;
        for a in &measure.atoms {
            if disc.contains(a.z) {
                lhs += a.weight * (t * metric.log_derivative(map, a.z)).exp();
            }
            if image.is_some_and(|d| !d.contains(a.z)) {
                continue;
            }
            if let Ok((_, z)) = map.preimage_near(a.z, disc.center) {
                if disc.contains(z) {
                    rhs += a.weight;
                }
            }
        }
        rows.push(ResidualRow {
            disc: *disc,
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
        });
    }
    let max = rows.iter().map(|r| r.residual).fold(0.0, f64::max);
    Ok(ConformalityReport { rows, max })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailEntry {
    pub k: u32,
    /// Mass outside the disc of radius `2ᵏ`.
    pub mass: f64,
    /// `2^{kt}/k^{3t}` times the mass.
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailProfile {
    pub entries: Vec<TailEntry>,
    pub weighted_sum: f64,
    /// Smallest `c` with `mass(k) ≤ c·k^{3t}/2^{kt}` for every `k`.
    pub fitted_c: f64,
}

pub fn tail_profile(measure: &AtomicMeasure, k_max: u32) -> Result<TailProfile> {
    if k_max < 2 {
        return Err(LabError::InvalidParameter("k_max must be at least 2".into()));
    }
    let t = measure.params.t;
    let entries: Vec<TailEntry> = (1..=k_max)
        .map(|k| {
            let r = 2f64.powi(k as i32);
            let mass = measure.atoms.iter().filter(|a| a.z.norm() >= r).map(|a| a.weight).sum::<f64>();
            let factor = (k as f64 * t * std::f64::consts::LN_2 - 3.0 * t * (k as f64).ln()).exp();
            TailEntry {
                k,
                mass,
                weighted: factor * mass,
            }
        })
        .collect();
    let weighted_sum = entries.iter().map(|e| e.weighted).sum();
    let fitted_c = entries.iter().map(|e| e.weighted).fold(0.0, f64::max);
    Ok(TailProfile {
        entries,
        weighted_sum,
        fitted_c,
    })
}

/// Smoothed indicator of a disc: 1 inside `radius`, 0 beyond `1.5·radius`.
pub fn soft_disc(disc: TestDisc) -> impl Fn(Complex64) -> f64 {
    move |z: Complex64| {
        let d = (z - disc.center).norm();
        ((1.5 * disc.radius - d) / (0.5 * disc.radius)).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLimit {
    pub measure: AtomicMeasure,
    pub s_grid: Vec<f64>,
    /// `integrals[i][j]`: test function `j` against `μ_{s_i}`.
    pub integrals: Vec<Vec<f64>>,
    /// Largest change over the panel between consecutive grid values.
    pub differences: Vec<f64>,
    /// Differences fail to decrease along the grid.
    pub non_cauchy: bool,
}

/// `μ_s` along a decreasing grid of `s` from one tree, with stability of
/// smoothed disc masses as `s` decreases.
pub fn weak_limit_approximation(
    layers: &BackwardLayers,
    b: BSequence,
    s_grid: &[f64],
    panel: &[TestDisc],
) -> Result<WeakLimit> {
    if s_grid.len() < 3 || s_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::InvalidParameter("s grid must be decreasing with at least three values".into()));
    }
    let mut integrals = Vec::with_capacity(s_grid.len());
    let mut last = None;
    for &s in s_grid {
        let m = layers.measure(s, b)?;
        integrals.push(panel.iter().map(|d| m.integrate(soft_disc(*d))).collect::<Vec<f64>>());
        last = Some(m);
    }
    let differences: Vec<f64> = integrals
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    let non_cauchy = differences.windows(2).any(|w| w[1] > w[0]);
    Ok(WeakLimit {
        measure: last.expect("grid is nonempty"),
        s_grid: s_grid.to_vec(),
        integrals,
        differences,
        non_cauchy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEvidence {
    pub disc_masses: Vec<f64>,
    /// More than `1 − 10⁻⁶` of the mass sits on at most two atoms.
    /// At most two locations carry all but 1e-6 of the mass.
    pub concentrated: bool,
    /// Every panel disc carries positive mass.
    pub positive_on_panel: bool,
}

pub fn support_dichotomy_check(measure: &AtomicMeasure, panel: &[TestDisc]) -> SupportEvidence {
    let disc_masses: Vec<f64> = panel.iter().map(|d| measure.mass_in_disc(d.center, d.radius)).collect();
    let mut pts: Vec<(Complex64, f64)> = measure.atoms.iter().map(|a| (a.z, a.weight)).collect();
    pts.sort_by(|a, b| a.0.re.total_cmp(&b.0.re).then(a.0.im.total_cmp(&b.0.im)));
    let mut w: Vec<f64> = Vec::new();
    let mut prev: Option<Complex64> = None;
    for (z, m) in pts {
        match prev {
            Some(p) if (z - p).norm() <= 1e-12 * (1.0 + p.norm()) => *w.last_mut().expect("nonempty") += m,
            _ => {
                w.push(m);
                prev = Some(z);
            }
        }
    }
    w.sort_by(|a, b| b.total_cmp(a));
    let top: f64 = w.iter().take(2).sum();
    SupportEvidence {
        positive_on_panel: disc_masses.iter().all(|&m| m > 0.0),
        concentrated: top > (1.0 - 1e-6) * measure.total_mass(),
        disc_masses,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn z0() -> Complex64 {
        Complex64::new(1.781_337_023_421_627_7, 0.0)
    }

    fn toy() -> AtomicMeasure {
        let mut m = AtomicMeasure::dirac(Complex64::new(0.5, 0.0), 1.5);
        m.atoms = vec![
            Atom { z: Complex64::new(0.5, 0.0), weight: 0.5, depth: 0 },
            Atom { z: Complex64::new(0.0, 1.0), weight: 0.3, depth: 1 },
            Atom { z: Complex64::new(-1.0, 1.0), weight: 0.2, depth: 1 },
        ];
        m
    }

    #[test]
    fn single_layer_weights() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let cfg = TreeConfig::exact(3);
        let m = build_patterson_sullivan(&f, 1.5, 0.2, z0(), BSequence::ConstantOne, 1, &cfg).unwrap();
        assert_eq!(m.atoms.len(), 7);
        let pre = f.preimages(z0()).unwrap();
        let raw: Vec<f64> = m
            .atoms
            .iter()
            .map(|a| (-0.2 - 1.5 * pre.log_spherical_derivative(a.z)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        for (a, r) in m.atoms.iter().zip(&raw) {
            assert_relative_eq!(a.weight, r / total, max_relative = 1e-12);
        }
    }

    #[test]
    fn poly_b_sequence() {
        let b = BSequence::Poly(1.0);
        assert_eq!(b.log_b(0), 0.0);
        assert_relative_eq!(b.log_b(5), 5f64.ln());
        assert_relative_eq!(b.log_b(101) - b.log_b(100), (1.01f64).ln(), epsilon = 1e-15);
    }

    #[test]
    fn dirac_at_zero_is_conformal_for_zexp() {
        let f = TranscendentalMap::zexp();
        for t in [0.5, 1.0, 2.0] {
            let m = AtomicMeasure::dirac(Complex64::new(0.0, 0.0), t);
            let panel = injective_panel(&f, &[Complex64::new(0.0, 0.0), Complex64::new(0.02, 0.01)], 0.1);
            let r = conformality_residual(&m, &f, &panel, Metric::Spherical).unwrap();
            assert_eq!(r.max, 0.0);
            assert!(support_dichotomy_check(&m, &panel).concentrated);
        }
    }

    #[test]
    fn oversized_disc_is_rejected() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let m = AtomicMeasure::dirac(z0(), 1.0);
        let err = conformality_residual(&m, &f, &[TestDisc::new(z0(), 5.0)], Metric::Spherical).unwrap_err();
        assert!(matches!(err, LabError::NonInjectiveTestSet { .. }));
    }

    #[test]
    fn disjoint_disc_has_zero_residual() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let m = toy();
        let d = TestDisc::new(Complex64::new(-3.0, -2.0), 0.05);
        let r = conformality_residual(&m, &f, &[d], Metric::Spherical).unwrap();
        assert_eq!(r.max, 0.0);
    }

    #[test]
    fn identity_reweighting() {
        let m = toy();
        let r = m.reweight_metric(|_| 0.0).unwrap();
        for (a, b) in m.atoms.iter().zip(&r.atoms) {
            assert_relative_eq!(a.weight, b.weight, max_relative = 1e-15);
        }
    }

    #[test]
    fn euclidean_reweighting_of_three_atoms() {
        // η = ((1+|z|²)/2)^t at t = 1.5: 0.625^1.5, 1, 1.5^1.5
        let m = toy();
        let r = m.reweight_metric(spherical_to_euclidean(1.5)).unwrap();
        let e = [0.625f64.powf(1.5), 1.0, 1.5f64.powf(1.5)];
        let big_m = 0.5 * e[0] + 0.3 * e[1] + 0.2 * e[2];
        for ((a, w), e) in r.atoms.iter().zip([0.5, 0.3, 0.2]).zip(e) {
            assert_relative_eq!(a.weight, w * e / big_m, max_relative = 1e-14);
        }
        let back = r.reweight_metric(|z| -spherical_to_euclidean(1.5)(z)).unwrap();
        for (a, b) in m.atoms.iter().zip(&back.atoms) {
            assert_relative_eq!(a.weight, b.weight, max_relative = 1e-12);
        }
    }

    #[test]
    fn escaping_atoms_have_infinite_mass() {
        let mut m = toy();
        m.atoms[2].z = Complex64::new(1e200, 0.0);
        assert_eq!(m.reweight_metric(spherical_to_euclidean(2.0)), Err(LabError::InfiniteMass));
    }

    #[test]
    fn compact_support_has_no_tail() {
        let p = tail_profile(&toy(), 6).unwrap();
        assert!(p.entries.iter().all(|e| e.mass == 0.0));
        assert_eq!(p.weighted_sum, 0.0);
    }

    #[test]
    fn constant_test_function_integrates_to_one() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let tree = PreimageTree::build(&f, 1.5, z0(), 6, &TreeConfig::default()).unwrap();
        let layers = BackwardLayers::from_tree(&tree).unwrap();
        let huge = TestDisc::new(Complex64::new(0.0, 0.0), 1e300);
        let w = weak_limit_approximation(&layers, BSequence::ConstantOne, &[0.2, 0.1, 0.05], &[huge]).unwrap();
        for row in &w.integrals {
            assert_relative_eq!(row[0], 1.0, epsilon = 1e-9);
        }
        assert!(w.differences.iter().all(|d| *d < 1e-9));
    }

    #[test]
    fn layer_masses_follow_partial_sums() {
        let f = TranscendentalMap::exp(0.3).unwrap();
        let cfg = TreeConfig::default();
        let tree = PreimageTree::build(&f, 1.5, z0(), 5, &cfg).unwrap();
        let m = BackwardLayers::from_tree(&tree).unwrap().measure(0.1, BSequence::ConstantOne).unwrap();
        assert_relative_eq!(m.total_mass(), 1.0, epsilon = 1e-9);
        for n in 1..5 {
            let sn = tree.partial_sum(n, crate::tree::Restriction::None).unwrap().log_sum;
            let sn1 = tree.partial_sum(n + 1, crate::tree::Restriction::None).unwrap().log_sum;
            let expect = (sn + 0.1 - sn1).exp();
            assert_relative_eq!(m.layer_mass(n) / m.layer_mass(n + 1), expect, max_relative = 1e-3);
        }
    }
}
