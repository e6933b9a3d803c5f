//! The four subcommands: pressure scans, Bowen searches, measures and validators.

use std::path::Path;

use num_complex::Complex64;
use pressure_lab::measure::{
    conformality_residual, injective_panel, support_dichotomy_check, tail_profile, weak_limit_approximation, BackwardLayers,
    ConformalityReport, SupportEvidence, TailProfile, TestDisc,
};
use pressure_lab::pressure::{
    classify_regime, estimate_from_tree, find_bowen_zero, BowenZero, PressureCurve, PressureEstimate, RegimeReport,
};
use pressure_lab::tree::{PreimageTree, Restriction};
use pressure_lab::validators::{
    boxcount_nonescaping, chained_bound_check, koebe_ratio_check, lebesgue_null_check, one_step_lower_bound_check,
    one_step_samples, tract_derivative_ratio_check, tract_modulus_ratio_check, DimensionEstimate, DistortionReport,
};
use pressure_lab::{Family, LabError, TranscendentalMap};
use serde::{Deserialize, Serialize};

use crate::config::{MeasureT, RunConfig};
use crate::error::{CliError, CliResult};
use crate::output::{num, OutputDir, RunManifest};

const PRESSURE_HEADER: [&str; 10] = [
    "family",
    "lambda_re",
    "lambda_im",
    "t",
    "n",
    "K",
    "restriction",
    "log_sum",
    "term_count",
    "tail_bound",
];

fn setup(cfg: &RunConfig) -> CliResult<(TranscendentalMap, Complex64)> {
    let map = cfg.build_map()?;
    let z0 = cfg.start_point(&map)?;
    Ok((map, z0))
}

fn pressure_rows(map: &TranscendentalMap, est: &PressureEstimate) -> Vec<Vec<String>> {
    est.records
        .iter()
        .map(|r| {
            vec![
                map.family().to_string(),
                num(map.lambda().re),
                num(map.lambda().im),
                num(r.t),
                r.n.to_string(),
                num(r.k_cutoff),
                r.restriction.label(),
                num(r.log_sum),
                r.term_count.to_string(),
                num(r.tail_bound),
            ]
        })
        .collect()
}

#[derive(Debug, Serialize)]
struct EstimateLine {
    kind: &'static str,
    family: Family,
    t: f64,
    restriction: String,
    value: f64,
    error: f64,
    window: (usize, usize),
    tail_bound: f64,
    truncated: bool,
    divergent: bool,
    positive: bool,
    negative: bool,
}

fn estimate_line(family: Family, restriction: Restriction, e: &PressureEstimate) -> EstimateLine {
    EstimateLine {
        kind: "estimate",
        family,
        t: e.t,
        restriction: restriction.label(),
        value: e.value,
        error: e.error,
        window: e.window,
        tail_bound: e.tail_bound,
        truncated: e.truncated,
        divergent: e.divergent,
        positive: e.is_positive(),
        negative: e.is_negative(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanOutcome {
    pub curve: PressureCurve,
    /// Restricted estimates by radius, one list per `t`.
    pub restricted: Vec<Vec<(f64, PressureEstimate)>>,
    pub regime: Result<RegimeReport, String>,
    pub manifest: RunManifest,
}

fn json_line<T: Serialize>(buf: &mut Vec<u8>, value: &T) {
    serde_json::to_writer(&mut *buf, value).expect("line serializes");
    buf.push(b'\n');
}

pub fn run_pressure_scan(cfg: &RunConfig, out: &Path) -> CliResult<ScanOutcome> {
    let section = cfg
        .pressure
        .as_ref()
        .ok_or_else(|| CliError::Config("pressure-scan needs a [pressure] section".into()))?;
    let grid = section.grid()?;
    let (map, z0) = setup(cfg)?;
    let tc = cfg.tree_config();
    let n_max = cfg.tree.n_max;
    let mut dir = OutputDir::open(out, "pressure-scan")?;
    let mut entries = Vec::with_capacity(grid.len());
    let mut restricted = Vec::with_capacity(grid.len());
    let mut rows = Vec::new();
    let mut jsonl = Vec::new();
    for &t in &grid {
        let tree = PreimageTree::build(&map, t, z0, n_max - 1, &tc)?;
        let est = estimate_from_tree(&tree, n_max, Restriction::None)?;
        rows.extend(pressure_rows(&map, &est));
        json_line(&mut jsonl, &estimate_line(map.family(), Restriction::None, &est));
        let mut per_r = Vec::with_capacity(section.radii.len());
        for &r in &section.radii {
            let restriction = Restriction::Disc { r };
            let e = estimate_from_tree(&tree, n_max, restriction)?;
            rows.extend(pressure_rows(&map, &e));
            json_line(&mut jsonl, &estimate_line(map.family(), restriction, &e));
            per_r.push((r, e));
        }
        entries.push(est);
        restricted.push(per_r);
    }
    let curve = PressureCurve::from_entries(entries);
    let regime = classify_regime(&curve).map_err(|e| e.to_string());
    json_line(
        &mut jsonl,
        &serde_json::json!({
            "kind": "curve",
            "family": map.family(),
            "lambda": [map.lambda().re, map.lambda().im],
            "z0": [z0.re, z0.im],
            "t0": curve.t0,
            "t_inf": curve.t_inf,
            "monotonicity_violations": curve.monotonicity_violations(),
            "convexity_violations": curve.convexity_violations(),
            "regime": &regime,
        }),
    );
    dir.write_csv("pressure.csv", &PRESSURE_HEADER, &rows)?;
    dir.write("pressure.jsonl", &jsonl)?;
    let manifest = dir.finish(cfg)?;
    Ok(ScanOutcome {
        curve,
        restricted,
        regime,
        manifest,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointSummary {
    pub t: f64,
    pub value: f64,
    pub error: f64,
    pub truncated: bool,
    pub divergent: bool,
}

impl From<&PressureEstimate> for EndpointSummary {
    fn from(e: &PressureEstimate) -> Self {
        Self {
            t: e.t,
            value: e.value,
            error: e.error,
            truncated: e.truncated,
            divergent: e.divergent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BowenReport {
    pub family: Family,
    pub lambda: [f64; 2],
    pub z0: [f64; 2],
    pub n_max: usize,
    pub tol: f64,
    pub t0: f64,
    pub bracket: (f64, f64),
    /// `(t, P̂, error)` at the configured bracket ends, with `P̂ − error > 0` and `P̂ + error < 0`.
    pub certificate: [(f64, f64, f64); 2],
    /// The final bracket ends are also separated beyond their error bars.
    pub final_certified: bool,
    pub lo: EndpointSummary,
    pub hi: EndpointSummary,
    pub sign_ambiguous: bool,
    /// `(t, P̂, error)` in evaluation order.
    pub history: Vec<(f64, f64, f64)>,
}

fn bowen_report(cfg: &RunConfig, map: &TranscendentalMap, z0: Complex64, b: &BowenZero) -> BowenReport {
    BowenReport {
        family: map.family(),
        lambda: [map.lambda().re, map.lambda().im],
        z0: [z0.re, z0.im],
        n_max: cfg.tree.n_max,
        tol: cfg.bowen.tol,
        t0: b.t0,
        bracket: b.bracket,
        certificate: [b.history[0], b.history[1]],
        final_certified: b.lo.is_positive() && b.hi.is_negative(),
        lo: (&b.lo).into(),
        hi: (&b.hi).into(),
        sign_ambiguous: b.sign_ambiguous,
        history: b.history.clone(),
    }
}

fn bowen(cfg: &RunConfig, map: &TranscendentalMap, z0: Complex64) -> CliResult<BowenReport> {
    let [lo, hi] = cfg.bowen.bracket;
    let b = find_bowen_zero(map, z0, (lo, hi), cfg.bowen.tol, cfg.tree.n_max, &cfg.tree_config())?;
    Ok(bowen_report(cfg, map, z0, &b))
}

pub fn run_bowen(cfg: &RunConfig, out: &Path) -> CliResult<(BowenReport, RunManifest)> {
    let (map, z0) = setup(cfg)?;
    let mut dir = OutputDir::open(out, "bowen")?;
    let report = bowen(cfg, &map, z0)?;
    dir.write_json("t0.json", &report)?;
    let manifest = dir.finish(cfg)?;
    Ok((report, manifest))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureRun {
    pub s: f64,
    pub atoms: usize,
    pub total_mass: f64,
    pub log_normalizer: f64,
    pub residual: ConformalityReport,
    pub tail: TailProfile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureOutcome {
    pub t: f64,
    pub panel: Vec<TestDisc>,
    pub runs: Vec<MeasureRun>,
    /// Largest panel difference between consecutive `s`, when the grid has three or more values.
    pub cauchy_differences: Option<Vec<f64>>,
    pub non_cauchy: Option<bool>,
    pub support: SupportEvidence,
    pub manifest: RunManifest,
}

fn default_panel(map: &TranscendentalMap, z0: Complex64) -> Vec<Complex64> {
    let shift = Complex64::new(0.0, std::f64::consts::TAU);
    let mut centers = vec![z0, z0 + shift, z0 - shift];
    centers.extend(map.repelling_periodic_points(2, 6.0, 0.5).into_iter().take(2));
    centers
}

pub fn run_measure(cfg: &RunConfig, out: &Path) -> CliResult<MeasureOutcome> {
    let m = cfg
        .measure
        .as_ref()
        .ok_or_else(|| CliError::Config("measure needs a [measure] section".into()))?;
    let (map, z0) = setup(cfg)?;
    let mut dir = OutputDir::open(out, "measure")?;
    let t = match m.t {
        MeasureT::Value(t) => t,
        MeasureT::Keyword(_) => {
            let report = bowen(cfg, &map, z0)?;
            dir.write_json("t0.json", &report)?;
            report.t0
        }
    };
    let centers = match &m.panel {
        Some(c) => c.iter().map(|&[re, im]| Complex64::new(re, im)).collect(),
        None => default_panel(&map, z0),
    };
    let panel = injective_panel(&map, &centers, m.panel_radius);
    let layers = BackwardLayers::build(&map, t, z0, m.depth, &cfg.tree_config())?;
    let mut runs = Vec::with_capacity(m.s_grid.len());
    let mut residual_rows = Vec::new();
    let mut tail_rows = Vec::new();
    let mut last = None;
    for &s in &m.s_grid {
        let measure = layers.measure(s, m.b)?;
        let atoms: Vec<Vec<String>> = measure
            .atoms
            .iter()
            .map(|a| vec![num(a.z.re), num(a.z.im), a.depth.to_string(), num(a.weight)])
            .collect();
        dir.write_csv(
            &format!("atoms_s{s}.csv"),
            &["location_re", "location_im", "depth", "weight"],
            &atoms,
        )?;
        let residual = conformality_residual(&measure, &map, &panel, m.metric)?;
        for r in &residual.rows {
            residual_rows.push(vec![
                num(s),
                num(r.disc.center.re),
                num(r.disc.center.im),
                num(r.disc.radius),
                num(r.lhs),
                num(r.rhs),
                num(r.residual),
            ]);
        }
        let tail = tail_profile(&measure, m.k_max)?;
        for e in &tail.entries {
            tail_rows.push(vec![num(s), e.k.to_string(), num(e.mass), num(e.weighted)]);
        }
        runs.push(MeasureRun {
            s,
            atoms: measure.atoms.len(),
            total_mass: measure.total_mass(),
            log_normalizer: measure.log_normalizer,
            residual,
            tail,
        });
        last = Some(measure);
    }
    dir.write_csv(
        "residuals.csv",
        &["s", "center_re", "center_im", "radius", "lhs", "rhs", "residual"],
        &residual_rows,
    )?;
    dir.write_csv("tails.csv", &["s", "k", "mass", "weighted"], &tail_rows)?;
    let (cauchy_differences, non_cauchy) = if m.s_grid.len() >= 3 {
        let weak = weak_limit_approximation(&layers, m.b, &m.s_grid, &panel)?;
        let mut rows = Vec::new();
        for (i, (s, ints)) in weak.s_grid.iter().zip(&weak.integrals).enumerate() {
            for (j, v) in ints.iter().enumerate() {
                let diff = if i == 0 { f64::NAN } else { (v - weak.integrals[i - 1][j]).abs() };
                rows.push(vec![num(*s), j.to_string(), num(*v), num(diff)]);
            }
        }
        dir.write_csv("convergence.csv", &["s", "disc", "integral", "difference"], &rows)?;
        (Some(weak.differences), Some(weak.non_cauchy))
    } else {
        (None, None)
    };
    let support = support_dichotomy_check(last.as_ref().expect("s grid is nonempty"), &panel);
    let manifest = dir.finish(cfg)?;
    Ok(MeasureOutcome {
        t,
        panel,
        runs,
        cauchy_differences,
        non_cauchy,
        support,
        manifest,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatorEntry {
    pub name: String,
    pub reports: Vec<DistortionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ValidatorEntry {
    fn from_result(name: &str, r: Result<(Vec<DistortionReport>, Option<serde_json::Value>), LabError>) -> Self {
        match r {
            Ok((reports, detail)) => Self {
                name: name.into(),
                reports,
                detail,
                error: None,
            },
            Err(e) => Self {
                name: name.into(),
                reports: Vec::new(),
                detail: None,
                error: Some(e.to_string()),
            },
        }
    }

    pub fn holds(&self) -> bool {
        self.error.is_none() && self.reports.iter().all(|r| r.bound_holds)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidatorSuite {
    pub family: Family,
    pub lambda: [f64; 2],
    pub seed: u64,
    pub entries: Vec<ValidatorEntry>,
    pub boxcount: Option<DimensionEstimate>,
    /// Every distortion bound that was checked holds.
    pub all_bounds_hold: bool,
    /// Validators that did not run, with the reason in their entry.
    pub refused: Vec<String>,
}

pub fn run_validators(cfg: &RunConfig, out: &Path) -> CliResult<(ValidatorSuite, RunManifest)> {
    let (map, z0) = setup(cfg)?;
    let v = &cfg.validators;
    let tc = cfg.tree_config();
    let seed = cfg.seed;
    let mut dir = OutputDir::open(out, "validate")?;
    let mut entries = Vec::new();

    let center = v.koebe_center.map(|[re, im]| Complex64::new(re, im)).unwrap_or(z0);
    entries.push(ValidatorEntry::from_result(
        "koebe",
        koebe_ratio_check(&map, center, v.koebe_radius, &v.koebe_lambdas, &v.koebe_address, v.samples, seed).map(|r| (r, None)),
    ));
    entries.push(ValidatorEntry::from_result(
        "tract_modulus",
        tract_modulus_ratio_check(&map, v.tract_r, v.tract_l, v.samples, seed.wrapping_add(1)).map(|r| (vec![r], None)),
    ));
    entries.push(ValidatorEntry::from_result(
        "tract_derivative",
        tract_derivative_ratio_check(&map, v.tract_r, v.tract_l, v.samples, seed.wrapping_add(2)).map(|r| (vec![r], None)),
    ));
    let zs = one_step_samples(v.one_step_r0, 1e6, v.samples, seed.wrapping_add(3));
    let one = one_step_lower_bound_check(&map, v.one_step_t, &zs, v.one_step_r0, &tc);
    let c_one = one.as_ref().ok().map(|o| o.c2);
    entries.push(ValidatorEntry::from_result(
        "one_step",
        one.map(|o| (vec![o.report], Some(serde_json::json!({ "c2": o.c2 })))),
    ));
    let chained = match c_one {
        Some(c) => PreimageTree::build(&map, v.one_step_t, z0, v.chained_depth, &tc)
            .and_then(|tree| chained_bound_check(&tree, v.chained_n_max, v.chained_k[0], v.chained_k[1], c)),
        None => Err(LabError::InvalidParameter("one-step constant unavailable".into())),
    };
    entries.push(ValidatorEntry::from_result(
        "chained",
        chained.map(|c| {
            let rows = serde_json::to_value(&c.rows).expect("rows serialize");
            (vec![c.annulus, c.dyadic], Some(rows))
        }),
    ));

    let window = v.window();
    let eps = v.eps_list();
    let boxcount = boxcount_nonescaping(&map, &window, &eps, &v.return_test);
    let boxcount = match boxcount {
        Ok(d) => {
            let rows: Vec<Vec<String>> = d
                .eps
                .iter()
                .zip(&d.counts)
                .zip(&d.area_fraction)
                .map(|((e, n), a)| vec![num(*e), n.to_string(), num(a * window.area())])
                .collect();
            dir.write_csv("boxcount.csv", &["eps", "count", "surviving_area"], &rows)?;
            entries.push(ValidatorEntry::from_result("boxcount", Ok((Vec::new(), Some(serde_json::to_value(&d).expect("serializes"))))));
            Some(d)
        }
        Err(e) => {
            entries.push(ValidatorEntry::from_result("boxcount", Err(e)));
            None
        }
    };
    let coarse: Vec<f64> = eps.iter().copied().filter(|e| *e >= 2f64.powi(-8)).collect();
    entries.push(ValidatorEntry::from_result(
        "lebesgue_null",
        lebesgue_null_check(&map, &window, &coarse, &v.return_test).map(|f| (Vec::new(), Some(serde_json::json!(f)))),
    ));

    let all_bounds_hold = entries.iter().flat_map(|e| &e.reports).all(|r| r.bound_holds);
    let refused = entries.iter().filter(|e| e.error.is_some()).map(|e| e.name.clone()).collect();
    let suite = ValidatorSuite {
        family: map.family(),
        lambda: [map.lambda().re, map.lambda().im],
        seed,
        entries,
        boxcount,
        all_bounds_hold,
        refused,
    };
    dir.write_json("validators.json", &suite)?;
    let manifest = dir.finish(cfg)?;
    Ok((suite, manifest))
}
