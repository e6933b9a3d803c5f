use std::fs;
use std::path::Path;
use std::process::Command;

use pressure_lab_cli::output::RunManifest;
use pressure_lab_cli::{run_bowen, run_measure, run_pressure_scan, run_validators, CliError, RunConfig};
use tempfile::TempDir;

const MINIMAL: &str = r#"
seed = 7
[map]
family = "EXP"
lambda = 0.3
[tree]
n_max = 4
[pressure]
t_grid = [1.5]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pressure-lab"))
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn assert_no_orphans(dir: &Path) {
    let m = manifest(dir);
    for entry in fs::read_dir(dir).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name != "manifest.json" {
            assert!(m.files.contains_key(&name), "{name} missing from manifest");
        }
    }
}

#[test]
fn minimal_scan_writes_one_curve_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig::from_toml(MINIMAL).unwrap();
    let out = run_pressure_scan(&cfg, tmp.path()).unwrap();
    assert_eq!(out.curve.entries.len(), 1);
    assert!(out.curve.entries[0].is_negative());
    let csv = fs::read_to_string(tmp.path().join("pressure.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "family,lambda_re,lambda_im,t,n,K,restriction,log_sum,term_count,tail_bound"
    );
    assert_eq!(lines.count(), 5);
    let jsonl = fs::read_to_string(tmp.path().join("pressure.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    assert_no_orphans(tmp.path());
}

#[test]
fn binary_scan_is_byte_identical_on_rerun() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let mut sums = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = bin()
            .args(["pressure-scan", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out)
            .args(["--threads", "1"])
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        sums.push(manifest(&out).files["pressure.csv"].sha256.clone());
    }
    assert_eq!(sums[0], sums[1]);
}

#[test]
fn malformed_config_exits_nonzero_with_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "[map]\nfamily = \"EXP\"\nlambda = \"big\"\n");
    let out = bin().arg("bowen").arg("--config").arg(&cfg).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let report: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["error"]["kind"], "config");
}

#[test]
fn config_validation_rejects_bad_grids() {
    let empty_s = r#"
[map]
family = "EXP"
lambda = 0.3
[measure]
t = 1.2
s_grid = []
"#;
    assert!(matches!(RunConfig::from_toml(empty_s), Err(CliError::Config(_))));
    let unsorted = MINIMAL.replace("[1.5]", "[1.5, 1.2]");
    assert!(matches!(RunConfig::from_toml(&unsorted), Err(CliError::Config(_))));
    let increasing_s = empty_s.replace("[]", "[0.05, 0.1]");
    assert!(matches!(RunConfig::from_toml(&increasing_s), Err(CliError::Config(_))));
    let bad_start = MINIMAL.replace("lambda = 0.3", "lambda = 0.3\nz0 = \"origin\"");
    assert!(matches!(RunConfig::from_toml(&bad_start), Err(CliError::Config(_))));
}

#[test]
fn bad_bracket_reports_both_signs() {
    let tmp = TempDir::new().unwrap();
    let text = MINIMAL.replace("[pressure]\nt_grid = [1.5]", "[bowen]\nbracket = [1.5, 2.0]");
    let cfg = write_config(tmp.path(), &text);
    let out = bin().arg("bowen").arg("--config").arg(&cfg).arg("--out").arg(tmp.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let report: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(report["error"]["kind"], "bad_bracket");
    let msg = report["error"]["message"].as_str().unwrap();
    assert!(msg.contains("P(1.5)") && msg.contains("P(2)"), "{msg}");
}

#[test]
fn bowen_rerun_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let text = MINIMAL.replace("[pressure]\nt_grid = [1.5]", "[bowen]\nbracket = [1.1, 2.0]\ntol = 0.1");
    let cfg = RunConfig::from_toml(&text).unwrap();
    let (a, _) = run_bowen(&cfg, &tmp.path().join("a")).unwrap();
    let (b, _) = run_bowen(&cfg, &tmp.path().join("b")).unwrap();
    assert!(a.t0 > 1.0 && a.t0 < 2.0);
    assert!(a.certificate[0].1 - a.certificate[0].2 > 0.0);
    assert!(a.certificate[1].1 + a.certificate[1].2 < 0.0);
    assert_eq!(a.t0.to_bits(), b.t0.to_bits());
    assert_eq!(
        fs::read(tmp.path().join("a/t0.json")).unwrap(),
        fs::read(tmp.path().join("b/t0.json")).unwrap()
    );
}

#[test]
fn zexp_dirac_measure_has_zero_residuals() {
    let tmp = TempDir::new().unwrap();
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/zexp_dirac.toml")).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    let out = run_measure(&cfg, tmp.path()).unwrap();
    assert_eq!(out.runs.len(), 3);
    for run in &out.runs {
        assert_eq!(run.residual.max, 0.0);
    }
    assert!(out.support.concentrated);
    for s in ["0.2", "0.1", "0.05"] {
        assert!(tmp.path().join(format!("atoms_s{s}.csv")).is_file());
    }
    let residuals = fs::read_to_string(tmp.path().join("residuals.csv")).unwrap();
    assert_eq!(residuals.lines().count(), 1 + 3 * 5);
    assert_no_orphans(tmp.path());
}

#[test]
fn later_commands_keep_earlier_files_in_manifest() {
    let tmp = TempDir::new().unwrap();
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/zexp_dirac.toml")).unwrap();
    let cfg = RunConfig::from_toml(&text).unwrap();
    run_measure(&cfg, tmp.path()).unwrap();
    let scan = RunConfig::from_toml(MINIMAL).unwrap();
    run_pressure_scan(&scan, tmp.path()).unwrap();
    let m = manifest(tmp.path());
    assert_eq!(m.files["tails.csv"].command, "measure");
    assert_eq!(m.files["pressure.csv"].command, "pressure-scan");
    assert_no_orphans(tmp.path());
}

#[test]
fn tan_validators_use_half_plane_tracts_and_refuse_boxcount() {
    let tmp = TempDir::new().unwrap();
    let text = r#"
[map]
family = "TAN"
lambda = 1.0
[validators]
samples = 200
"#;
    let cfg = RunConfig::from_toml(text).unwrap();
    let (suite, _) = run_validators(&cfg, tmp.path()).unwrap();
    let get = |n: &str| suite.entries.iter().find(|e| e.name == n).unwrap();
    assert!(get("tract_modulus").holds());
    assert!(get("tract_derivative").holds());
    assert!(get("boxcount").error.as_deref().unwrap().contains("not hyperbolic"));
    assert!(suite.refused.contains(&"boxcount".to_string()));
    assert!(tmp.path().join("validators.json").is_file());
    assert_no_orphans(tmp.path());
}

#[test]
fn busy_output_directory_is_refused() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join(".pressure-lab.lock"), "").unwrap();
    let cfg = RunConfig::from_toml(MINIMAL).unwrap();
    assert!(matches!(run_pressure_scan(&cfg, tmp.path()), Err(CliError::Busy(_))));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"));
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}
