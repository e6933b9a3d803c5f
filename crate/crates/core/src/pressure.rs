//! Pressure estimates from preimage sums, Bowen zeros and regime labels.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::maps::TranscendentalMap;
use crate::tree::{PartialSumRecord, PreimageTree, Restriction, TreeConfig};

/// `Sₙ^A(t, z0)` for a single depth.
pub fn partial_sum(
    map: &TranscendentalMap,
    t: f64,
    z0: Complex64,
    n: usize,
    restriction: Restriction,
    cfg: &TreeConfig,
) -> Result<PartialSumRecord> {
    let tree = PreimageTree::build(map, t, z0, n.saturating_sub(1), cfg)?;
    tree.partial_sum(n, restriction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureEstimate {
    pub t: f64,
    pub value: f64,
    pub error: f64,
    /// Depth window `[n1, n2]` of the slope fit.
    pub window: (usize, usize),
    /// Relative truncation at the deepest level.
    pub tail_bound: f64,
    /// The truncation target was missed; `value` is then a lower bound.
    pub truncated: bool,
    /// Evidence that `P(t) = +∞`.
    pub divergent: bool,
    pub records: Vec<PartialSumRecord>,
}

impl PressureEstimate {
    pub fn is_positive(&self) -> bool {
        self.value - self.error > 0.0
    }

    pub fn is_negative(&self) -> bool {
        self.value + self.error < 0.0
    }
}

/// Least-squares slope and its standard error.
pub(crate) fn slope_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if xs.len() < 3 {
        return (slope, 0.0);
    }
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - my - slope * (x - mx)).powi(2))
        .sum();
    (slope, (rss / (m - 2.0) / sxx).sqrt())
}

/// Slope of `n ↦ ln Sₙ` over `[⌈n_max/2⌉, n_max]` from records `0..=n_max`.
pub fn estimate_from_records(t: f64, records: Vec<PartialSumRecord>, eps_trunc: f64) -> Result<PressureEstimate> {
    let n_max = records.len().saturating_sub(1);
    if n_max < 4 {
        return Err(LabError::InsufficientDepth { required: 4, got: n_max });
    }
    let n1 = n_max.div_ceil(2);
    let window = &records[n1..=n_max];
    if let Some(r) = window.iter().find(|r| r.log_sum == f64::NEG_INFINITY) {
        return Err(LabError::DegenerateRestriction { depth: r.n });
    }
    let tail_bound = records[n_max].tail_bound;
    let truncated = !(tail_bound <= eps_trunc);
    let ys: Vec<f64> = window.iter().map(|r| r.log_sum).collect();
    if ys.iter().any(|y| y.is_infinite()) {
        return Ok(PressureEstimate {
            t,
            value: f64::INFINITY,
            error: 0.0,
            window: (n1, n_max),
            tail_bound,
            truncated,
            divergent: true,
            records,
        });
    }
    let xs: Vec<f64> = window.iter().map(|r| r.n as f64).collect();
    let (value, se) = slope_fit(&xs, &ys);
    let incs: Vec<f64> = ys.windows(2).map(|w| w[1] - w[0]).collect();
    let spread = incs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - incs.iter().copied().fold(f64::INFINITY, f64::min);
    // ln Sₙ/n rising by more than 1 per step over the three deepest levels
    let rates: Vec<f64> = records[n_max - 2..=n_max]
        .iter()
        .map(|r| r.log_sum / r.n as f64)
        .collect();
    let superlinear = rates.windows(2).all(|w| w[1] - w[0] > 1.0);
    Ok(PressureEstimate {
        t,
        value,
        error: se.max(spread),
        window: (n1, n_max),
        tail_bound,
        truncated,
        divergent: superlinear || tail_bound.is_infinite(),
        records,
    })
}

/// Pressure estimate from a tree of depth at least `n_max - 1`.
pub fn estimate_from_tree(tree: &PreimageTree, n_max: usize, restriction: Restriction) -> Result<PressureEstimate> {
    let records = (0..=n_max)
        .map(|n| tree.partial_sum(n, restriction))
        .collect::<Result<Vec<_>>>()?;
    estimate_from_records(tree.t, records, tree.config.eps_trunc)
}

pub fn estimate_pressure(
    map: &TranscendentalMap,
    t: f64,
    z0: Complex64,
    n_max: usize,
    restriction: Restriction,
    cfg: &TreeConfig,
) -> Result<PressureEstimate> {
    if n_max < 4 {
        return Err(LabError::InsufficientDepth { required: 4, got: n_max });
    }
    let tree = PreimageTree::build(map, t, z0, n_max - 1, cfg)?;
    estimate_from_tree(&tree, n_max, restriction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedRow {
    pub r: f64,
    pub estimate: PressureEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestrictedCheck {
    pub rows: Vec<RestrictedRow>,
    pub unrestricted: PressureEstimate,
    /// Smallest radius from which all later estimates agree within the tolerance.
    pub stabilization_radius: f64,
}

/// Restricted pressures `P̂_r` for increasing radii, all from one tree.
pub fn restricted_pressure_check(
    map: &TranscendentalMap,
    t: f64,
    z0: Complex64,
    r_list: &[f64],
    n_max: usize,
    cfg: &TreeConfig,
    tol: f64,
) -> Result<RestrictedCheck> {
    if r_list.len() < 2 || r_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LabError::InvalidParameter("radii must be increasing, at least two".into()));
    }
    if n_max < 4 {
        return Err(LabError::InsufficientDepth { required: 4, got: n_max });
    }
    let tree = PreimageTree::build(map, t, z0, n_max - 1, cfg)?;
    let unrestricted = estimate_from_tree(&tree, n_max, Restriction::None)?;
    let rows = r_list
        .iter()
        .map(|&r| {
            estimate_from_tree(&tree, n_max, Restriction::Disc { r }).map(|estimate| RestrictedRow { r, estimate })
        })
        .collect::<Result<Vec<_>>>()?;
    let last = rows.len() - 1;
    let gap = (rows[last].estimate.value - rows[last - 1].estimate.value).abs();
    if gap > tol {
        return Err(LabError::NoStabilization { gap, tol });
    }
    let mut from = last;
    while from > 0 && (rows[from - 1].estimate.value - rows[last].estimate.value).abs() <= tol {
        from -= 1;
    }
    Ok(RestrictedCheck {
        stabilization_radius: rows[from].r,
        rows,
        unrestricted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BowenZero {
    pub t0: f64,
    pub bracket: (f64, f64),
    /// Estimates at the final bracket ends.
    pub lo: PressureEstimate,
    pub hi: PressureEstimate,
    /// Some estimate inside the search had an error bar straddling 0.
    pub sign_ambiguous: bool,
    /// `(t, P̂, error)` for every evaluation in order.
    pub history: Vec<(f64, f64, f64)>,
}

/// Bisection on the sign of `P̂` until the bracket is at most `tol` wide.
pub fn find_bowen_zero(
    map: &TranscendentalMap,
    z0: Complex64,
    bracket: (f64, f64),
    tol: f64,
    n_max: usize,
    cfg: &TreeConfig,
) -> Result<BowenZero> {
    let (mut a, mut b) = bracket;
    if !(a < b) || !(tol > 0.0) {
        return Err(LabError::InvalidParameter("need t_lo < t_hi and tol > 0".into()));
    }
    let eval = |t: f64| estimate_pressure(map, t, z0, n_max, Restriction::None, cfg);
    let mut pa = eval(a)?;
    let mut pb = eval(b)?;
    let mut history = vec![(a, pa.value, pa.error), (b, pb.value, pb.error)];
    if !pa.is_positive() || !pb.is_negative() {
        return Err(LabError::BadBracket {
            t_lo: a,
            p_lo: pa.value,
            e_lo: pa.error,
            t_hi: b,
            p_hi: pb.value,
            e_hi: pb.error,
        });
    }
    let mut ambiguous = false;
    while b - a > tol {
        let m = 0.5 * (a + b);
        let pm = eval(m)?;
        history.push((m, pm.value, pm.error));
        if !pm.is_positive() && !pm.is_negative() {
            ambiguous = true;
        }
        if pm.value > 0.0 {
            a = m;
            pa = pm;
        } else {
            b = m;
            pb = pm;
        }
    }
    Ok(BowenZero {
        t0: 0.5 * (a + b),
        bracket: (a, b),
        lo: pa,
        hi: pb,
        sign_ambiguous: ambiguous,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureCurve {
    pub entries: Vec<PressureEstimate>,
    pub t0: Option<f64>,
    pub t_inf: Option<f64>,
}

impl PressureCurve {
    pub fn from_entries(mut entries: Vec<PressureEstimate>) -> Self {
        entries.sort_by(|a, b| a.t.total_cmp(&b.t));
        let t_inf = entries.iter().filter(|e| e.divergent).map(|e| e.t).fold(None, |m: Option<f64>, t| {
            Some(m.map_or(t, |m| m.max(t)))
        });
        let finite: Vec<&PressureEstimate> = entries.iter().filter(|e| !e.divergent).collect();
        let t0 = finite.windows(2).find_map(|w| {
            let (p, q) = (w[0], w[1]);
            (p.value > 0.0 && q.value <= 0.0).then(|| p.t + (q.t - p.t) * p.value / (p.value - q.value))
        });
        Self { entries, t0, t_inf }
    }

    /// Pairs `(t_i, t_{i+1})` where `P̂` rises by more than the combined error.
    pub fn monotonicity_violations(&self) -> Vec<(f64, f64)> {
        self.entries
            .windows(2)
            .filter(|w| w[1].value > w[0].value + w[0].error + w[1].error)
            .map(|w| (w[0].t, w[1].t))
            .collect()
    }

    /// Interior points whose discrete second difference is below minus the combined error.
    pub fn convexity_violations(&self) -> Vec<f64> {
        self.entries
            .windows(3)
            .filter(|w| {
                let d2 = w[0].value - 2.0 * w[1].value + w[2].value;
                d2.is_finite() && d2 < -(w[0].error + 2.0 * w[1].error + w[2].error)
            })
            .map(|w| w[1].t)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// `P(t_∞) = +∞` and a zero `t0 > t_∞`.
    A,
    /// `P(t_∞)` finite and nonnegative, zero at `t0 ≥ t_∞`.
    B,
    /// No zero: `P` jumps from `+∞` to a negative value.
    C,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub t_inf: Option<f64>,
    pub t0: Option<f64>,
    pub evidence: String,
}

pub fn classify_regime(curve: &PressureCurve) -> Result<RegimeReport> {
    let e = &curve.entries;
    if e.len() < 2 {
        return Err(LabError::Inconclusive("need at least two grid points".into()));
    }
    if !curve.monotonicity_violations().is_empty() {
        return Err(LabError::Inconclusive("pressure increases beyond its error bars".into()));
    }
    let first_finite = e.iter().position(|x| !x.divergent);
    let Some(i) = first_finite else {
        return Err(LabError::Inconclusive("pressure diverges on the whole grid".into()));
    };
    if e[i..].iter().any(|x| x.divergent) {
        return Err(LabError::Inconclusive("divergent point above a finite one".into()));
    }
    let p = &e[i];
    if i > 0 {
        if p.is_negative() {
            return Ok(RegimeReport {
                regime: Regime::C,
                t_inf: curve.t_inf,
                t0: None,
                evidence: format!("P jumps from +inf at t={} to {:.4} at t={}", e[i - 1].t, p.value, p.t),
            });
        }
        if let Some(t0) = curve.t0 {
            return Ok(RegimeReport {
                regime: Regime::A,
                t_inf: curve.t_inf,
                t0: Some(t0),
                evidence: format!("P = +inf up to t={}, finite positive above, zero near {t0:.4}", e[i - 1].t),
            });
        }
        return Err(LabError::Inconclusive("no sign change above the divergence threshold".into()));
    }
    match curve.t0 {
        Some(t0) if p.value >= 0.0 => Ok(RegimeReport {
            regime: Regime::B,
            t_inf: None,
            t0: Some(t0),
            evidence: format!("P finite on the grid with P({}) = {:.4} ≥ 0 and a zero near {t0:.4}", p.t, p.value),
        }),
        _ => Err(LabError::Inconclusive("grid shows neither divergence nor a zero".into())),
    }
}
