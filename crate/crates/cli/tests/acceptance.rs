//! End-to-end acceptance run: one pass/fail line per criterion.

use std::fs;
use std::path::Path;
use std::time::Instant;

use pressure_lab::measure::BSequence;
use pressure_lab::pressure::PressureEstimate;
use pressure_lab::validators::{koebe_ratio_check, tract_derivative_ratio_check, tract_modulus_ratio_check};
use pressure_lab::TranscendentalMap;
use pressure_lab_cli::config::{MeasureSection, MeasureT, StartSpec};
use pressure_lab_cli::{run_bowen, run_measure, run_pressure_scan, run_validators, RunConfig};
use tempfile::TempDir;

const BASE: &str = r#"
seed = 7
[map]
family = "EXP"
lambda = 0.3
z0 = "auto-repelling-fixed-point"
[tree]
n_max = 8
cutoff = "adaptive"
eps_trunc = 1e-4
"#;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn config(extra: &str) -> RunConfig {
    RunConfig::from_toml(&format!("{BASE}{extra}")).expect("acceptance config parses")
}

fn show(e: &PressureEstimate) -> String {
    format!("{:.4} ± {:.4}", e.value, e.error)
}

fn sign_structure(root: &Path) -> (Outcome, Vec<u8>) {
    let cfg = config("[pressure]\nt_grid = [1.0, 2.0]\n");
    let scan = run_pressure_scan(&cfg, &root.join("c1")).expect("sign scan");
    let (p1, p2) = (&scan.curve.entries[0], &scan.curve.entries[1]);
    let csv = fs::read(root.join("c1/pressure.csv")).expect("pressure.csv");
    let outcome = Outcome {
        id: 1,
        name: "sign_structure",
        pass: p1.is_positive() && p2.is_negative(),
        detail: format!(
            "P(1.0) = {}{}, P(2.0) = {}",
            show(p1),
            if p1.divergent { " (divergent)" } else { "" },
            show(p2)
        ),
    };
    (outcome, csv)
}

fn determinism(root: &Path, first: &[u8]) -> Outcome {
    let cfg = config("[pressure]\nt_grid = [1.0, 2.0]\n");
    run_pressure_scan(&cfg, &root.join("c11")).expect("rerun");
    let second = fs::read(root.join("c11/pressure.csv")).expect("pressure.csv");
    Outcome {
        id: 11,
        name: "determinism",
        pass: first == second,
        detail: format!("{} bytes, identical = {}", first.len(), first == second),
    }
}

fn bowen_range(root: &Path) -> (Outcome, f64) {
    let cfg = config("[bowen]\nbracket = [1.0, 2.0]\ntol = 0.02\n");
    let (b, _) = run_bowen(&cfg, &root.join("c2")).expect("bowen");
    let [lo, hi] = b.certificate;
    let certified = lo.1 - lo.2 > 0.0 && hi.1 + hi.2 < 0.0;
    let narrow = b.bracket.1 - b.bracket.0 <= 0.02;
    let outcome = Outcome {
        id: 2,
        name: "bowen_range",
        pass: b.t0 > 1.0 && b.t0 < 2.0 && certified && narrow,
        detail: format!(
            "t0 = {:.4} in [{:.4}, {:.4}], certificate P({}) = {:.3} ± {:.3}, P({}) = {:.3} ± {:.3}",
            b.t0, b.bracket.0, b.bracket.1, lo.0, lo.1, lo.2, hi.0, hi.1, hi.2
        ),
    };
    (outcome, b.t0)
}

fn start_independence(root: &Path) -> Outcome {
    let map = TranscendentalMap::exp(0.3).unwrap();
    let pts = map.repelling_periodic_points(1, 6.0, 0.5);
    let mut values = Vec::new();
    for (i, z) in pts.iter().take(2).enumerate() {
        let mut cfg = config("[pressure]\nt_grid = [1.5]\n");
        cfg.map.z0 = StartSpec::Point([z.re, z.im]);
        let scan = run_pressure_scan(&cfg, &root.join(format!("c3_{i}"))).expect("start point scan");
        values.push((*z, scan.curve.entries[0].clone()));
    }
    let diff = (values[0].1.value - values[1].1.value).abs();
    Outcome {
        id: 3,
        name: "start_independence",
        pass: values.len() == 2 && diff <= 0.05,
        detail: format!(
            "P(1.5) = {} at z0 = {:.4}, {} at z0 = {:.4}, |diff| = {diff:.4}",
            show(&values[0].1),
            values[0].0,
            show(&values[1].1),
            values[1].0
        ),
    }
}

fn restricted(root: &Path) -> Outcome {
    let cfg = config("[pressure]\nt_grid = [1.5]\nradii = [10.0, 100.0, 1000.0, 10000.0]\n");
    let scan = run_pressure_scan(&cfg, &root.join("c4")).expect("restricted scan");
    let full = &scan.curve.entries[0];
    let rows = &scan.restricted[0];
    let close = rows
        .iter()
        .filter(|(r, _)| *r >= 1e3)
        .all(|(_, e)| (e.value - full.value).abs() <= 0.05);
    let monotone_p = rows.windows(2).all(|w| w[1].1.value >= w[0].1.value);
    let monotone_sums = rows.windows(2).all(|w| {
        w[0].1.records.iter().zip(&w[1].1.records).all(|(a, b)| b.log_sum >= a.log_sum)
    }) && rows
        .last()
        .map(|(_, e)| e.records.iter().zip(&full.records).all(|(a, b)| b.log_sum >= a.log_sum))
        .unwrap_or(false);
    let listing: Vec<String> = rows.iter().map(|(r, e)| format!("P_{r:e} = {:.5}", e.value)).collect();
    Outcome {
        id: 4,
        name: "restricted_pressure",
        pass: close && monotone_p && monotone_sums,
        detail: format!("{}, P = {:.5}, monotone sums = {monotone_sums}", listing.join(", "), full.value),
    }
}

fn dirac(root: &Path) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for t in [0.5, 1.0, 2.0] {
        let cfg = RunConfig::from_toml(&format!(
            r#"
[map]
family = "ZEXP"
z0 = [0.0, 0.0]
[measure]
t = {t:?}
s_grid = [0.2]
depth = 10
panel = [[0.0, 0.0], [0.05, 0.0], [-0.05, 0.0], [0.0, 0.05], [0.0, -0.05]]
panel_radius = 0.1
"#
        ))
        .expect("dirac config");
        match run_measure(&cfg, &root.join(format!("c5_{t}"))) {
            Ok(m) => {
                let r = &m.runs[0].residual;
                ok &= r.rows.len() == 5 && m.support.concentrated;
                worst = worst.max(r.max);
            }
            Err(_) => ok = false,
        }
    }
    Outcome {
        id: 5,
        name: "dirac_conformality",
        pass: ok && worst <= 4.0 * f64::EPSILON,
        detail: format!("max residual over t in {{0.5, 1, 2}} = {worst:e}"),
    }
}

fn patterson_sullivan(root: &Path, t0: f64) -> (Outcome, Outcome) {
    let mut cfg = config("");
    cfg.measure = Some(MeasureSection {
        t: MeasureT::Value(t0),
        s_grid: vec![0.2, 0.1, 0.05],
        depth: 80,
        b: BSequence::Poly(1.0),
        k_max: 24,
        panel: None,
        panel_radius: 0.25,
        metric: Default::default(),
    });
    let m = run_measure(&cfg, &root.join("c6")).expect("patterson-sullivan measure");
    let res: Vec<f64> = m.runs.iter().map(|r| r.residual.max).collect();
    let six = Outcome {
        id: 6,
        name: "ps_conformality_trend",
        pass: res[2] < res[0] && res[2] <= 0.05,
        detail: format!(
            "t = {t0:.4}, max residual s=0.2: {:.4}, s=0.1: {:.4}, s=0.05: {:.4}",
            res[0], res[1], res[2]
        ),
    };
    let sums: Vec<f64> = m.runs.iter().map(|r| r.tail.weighted_sum).collect();
    let top = sums.iter().copied().fold(0.0, f64::max);
    let uniform = sums.iter().all(|s| s.is_finite() && *s < 2.0 * top);
    let c = m.runs.iter().map(|r| r.tail.fitted_c).fold(0.0, f64::max);
    let t = m.t;
    let per_k = m.runs.iter().flat_map(|r| &r.tail.entries).all(|e| {
        let k = e.k as f64;
        let bound = c * (3.0 * t * k.ln() - k * t * std::f64::consts::LN_2).exp();
        e.mass <= bound * (1.0 + 1e-12)
    });
    let seven = Outcome {
        id: 7,
        name: "uniform_weighted_tail",
        pass: uniform && per_k && c.is_finite(),
        detail: format!(
            "weighted sums s=0.2: {:.4}, s=0.1: {:.4}, s=0.05: {:.4}, single c = {c:.4}",
            sums[0], sums[1], sums[2]
        ),
    };
    (six, seven)
}

fn distortion_and_boxcount(root: &Path, t0: f64) -> (Outcome, Outcome) {
    let cfg = config("[validators]\nsamples = 1000\neps_exponents = [6, 10]\n");
    let (suite, _) = run_validators(&cfg, &root.join("c8")).expect("validators");
    let map = TranscendentalMap::exp(0.3).unwrap();
    let c = num_complex::Complex64::new(5.0, 2.0);
    let identity = [
        koebe_ratio_check(&map, c, 1.0, &[0.5], &[1], 0, 1).unwrap()[0].worst_ratio,
        tract_modulus_ratio_check(&map, 10.0, 10.0, 0, 1).unwrap().worst_ratio,
        tract_derivative_ratio_check(&map, 10.0, 10.0, 0, 1).unwrap().worst_ratio,
    ];
    let failing: Vec<String> = suite
        .entries
        .iter()
        .flat_map(|e| &e.reports)
        .filter(|r| !r.bound_holds)
        .map(|r| r.lemma.clone())
        .collect();
    let distortion = ["koebe", "tract_modulus", "tract_derivative", "one_step", "chained"];
    let ran = distortion.iter().all(|n| !suite.refused.iter().any(|r| r == n));
    let eight = Outcome {
        id: 8,
        name: "distortion_suite",
        pass: suite.all_bounds_hold && ran && identity.iter().all(|&r| r == 1.0),
        detail: format!(
            "{} reports, failing: {:?}, identity ratios {:?}",
            suite.entries.iter().map(|e| e.reports.len()).sum::<usize>(),
            failing,
            identity
        ),
    };
    let nine = match &suite.boxcount {
        Some(d) => Outcome {
            id: 9,
            name: "boxcount_cross_check",
            pass: (d.dim - t0).abs() <= 0.2 && d.dim > 1.0 && d.dim < 2.0,
            detail: format!("dim = {:.4} (ci {:.4}..{:.4}) vs t0 = {t0:.4}, counts {:?}", d.dim, d.ci.0, d.ci.1, d.counts),
        },
        None => Outcome {
            id: 9,
            name: "boxcount_cross_check",
            pass: false,
            detail: "box count refused".into(),
        },
    };
    (eight, nine)
}

fn shape(root: &Path) -> Outcome {
    let cfg = config("[pressure]\nt_range = { start = 1.0, stop = 2.0, step = 0.1 }\n");
    let scan = run_pressure_scan(&cfg, &root.join("c10")).expect("grid scan");
    let mono = scan.curve.monotonicity_violations();
    let conv = scan.curve.convexity_violations();
    let points: Vec<String> = scan.curve.entries.iter().map(|e| format!("{:.1}:{:.3}", e.t, e.value)).collect();
    Outcome {
        id: 10,
        name: "monotone_convex",
        pass: scan.curve.entries.len() == 11 && mono.is_empty() && conv.is_empty(),
        detail: format!(
            "{} points [{}], monotonicity violations {mono:?}, convexity violations {conv:?}",
            scan.curve.entries.len(),
            points.join(" ")
        ),
    }
}

fn main() {
    let tmp = TempDir::new().expect("temp dir");
    let root = tmp.path();
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let (one, csv) = sign_structure(root);
    outcomes.push(one);
    outcomes.push(determinism(root, &csv));
    let (two, t0) = bowen_range(root);
    outcomes.push(two);
    outcomes.push(start_independence(root));
    outcomes.push(restricted(root));
    outcomes.push(dirac(root));
    let (six, seven) = patterson_sullivan(root, t0);
    outcomes.push(six);
    outcomes.push(seven);
    let (eight, nine) = distortion_and_boxcount(root, t0);
    outcomes.push(eight);
    outcomes.push(nine);
    outcomes.push(shape(root));
    outcomes.sort_by_key(|o| o.id);
    println!("acceptance ({:.0} s)", start.elapsed().as_secs_f64());
    for o in &outcomes {
        println!("criterion {:>2} {:<24} {}  {}", o.id, o.name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
