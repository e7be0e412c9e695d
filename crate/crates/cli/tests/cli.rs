use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use krflab_cli::commands::read_csv;

fn krflab(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_krflab"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env("KRFLAB_THREADS", "2")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ROUND: &str = "grid.modes = 24\nflow.t_end = 1\n";

#[test]
fn unknown_key_is_a_config_error_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = krflab(dir.path(), "grid.modes = 24\n# comment\nflow.speed = 2\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn zero_end_time_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = krflab(dir.path(), "flow.t_end = 0\n", &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("flow.t_end"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_krflab")).args(["--config", "/nonexistent/krf.cfg", "simulate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn round_simulation_has_unit_curvature_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o = krflab(dir.path(), ROUND, &["--quiet", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/diagnostics.csv")).unwrap();
    assert!(csv.starts_with("# krflab diagnostics schema 1\nt,R_min,R_max,sup_grad_u_sq,vol,a,c_s,c_s_residual,W\n"));
    let (header, cols) = read_csv(&csv).unwrap();
    let col = |n: &str| &cols[header.iter().position(|h| h == n).unwrap()];
    assert!(col("R_min").iter().chain(col("R_max")).all(|r| (r - 1.0).abs() < 1e-8));
    assert!(col("vol").iter().all(|v| (v - 4.0 * PI).abs() < 1e-10));

    let o = krflab(dir.path(), ROUND, &["--quiet", "simulate"]);
    assert!(o.status.success());
    assert_eq!(csv, fs::read_to_string(dir.path().join("out/diagnostics.csv")).unwrap());
}

#[test]
fn snapshot_feeds_bergman_and_green() {
    let dir = tempfile::tempdir().unwrap();
    assert!(krflab(dir.path(), ROUND, &["--quiet", "simulate"]).status.success());
    let snap = dir.path().join("out/snapshots").join(krflab_cli::snapshot::file_name(1.0));
    let text = fs::read_to_string(&snap).unwrap();
    assert!(text.starts_with("KRFLAB1\n"));

    let o = krflab(dir.path(), "grid.modes = 24\nbergman.levels = 1, 3\n", &["--quiet", "bergman", snap.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/bergman.csv")).unwrap();
    let mut seen = 0;
    for line in csv.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        let l: f64 = f[1].parse().unwrap();
        let rho: f64 = f[2].parse().unwrap();
        if f[0] == "integral" {
            assert!((rho - (2.0 * l + 1.0)).abs() < 1e-8);
            seen += 1;
        } else {
            assert!((rho - (2.0 * l + 1.0) / (4.0 * PI)).abs() < 1e-8);
        }
    }
    assert_eq!(seen, 2);

    let o = krflab(dir.path(), ROUND, &["--quiet", "green", snap.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/green.json")).unwrap()).unwrap();
    assert!((summary["c_lower"].as_f64().unwrap() - 1.0 / (4.0 * PI)).abs() < 1e-8);

    fs::write(&snap, text.replacen("KRFLAB1", "KRFLAB9", 1)).unwrap();
    let o = krflab(dir.path(), ROUND, &["--quiet", "bergman", snap.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version mismatch"), "{}", stderr(&o));
}

#[test]
fn kahler_einstein_verify_passes_and_plots_are_svg() {
    let dir = tempfile::tempdir().unwrap();
    let o = krflab(dir.path(), ROUND, &["--quiet", "verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/report.json")).unwrap()).unwrap();
    let checks = report["report"]["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 17);
    assert!(checks.iter().all(|c| c["passed"].as_bool() == Some(true)));
    let names: Vec<&str> = checks.iter().map(|c| c["name"].as_str().unwrap()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);

    assert!(krflab(dir.path(), ROUND, &["--quiet", "simulate"]).status.success());
    assert!(krflab(dir.path(), ROUND, &["--quiet", "plot"]).status.success());
    for name in ["sup_curvature.svg", "kernel_ratio.svg", "green.svg", "entropy.svg", "curvature_range.svg"] {
        let text = fs::read_to_string(dir.path().join("out").join(name)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc.descendants().any(|n| n.has_tag_name("polyline")), "{name}");
    }
}

#[test]
fn verify_rejects_short_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let o = krflab(dir.path(), "grid.modes = 16\nflow.t_end = 0.5\n", &["--quiet", "verify"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ensemble_lower_bound_is_positive_and_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "grid.modes = 32\nensemble.count = 4\nensemble.R0 = 0.5\nbergman.levels = 1, 2\n";
    let o = krflab(dir.path(), cfg, &["--quiet", "--seed", "3", "ensemble"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("out/ensemble_summary.csv")).unwrap();
    let (header, cols) = read_csv(&summary).unwrap();
    let i = header.iter().position(|h| h == "min_inf_rho_1").unwrap();
    assert!(cols[i].iter().all(|&v| v > 0.0));
    let first = fs::read(dir.path().join("out/ensemble.json")).unwrap();
    assert!(krflab(dir.path(), cfg, &["--quiet", "--seed", "3", "ensemble"]).status.success());
    assert_eq!(first, fs::read(dir.path().join("out/ensemble.json")).unwrap());
    assert!(krflab(dir.path(), cfg, &["--quiet", "--seed", "4", "ensemble"]).status.success());
    assert_ne!(first, fs::read(dir.path().join("out/ensemble.json")).unwrap());
}

#[test]
fn entropy_command_reports_monotone_w() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "grid.modes = 32\ninitial.potential = 0, 0.03, 0.06, -0.02\n";
    let o = krflab(dir.path(), cfg, &["--quiet", "entropy"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, cols) = read_csv(&fs::read_to_string(dir.path().join("out/entropy.csv")).unwrap()).unwrap();
    let w = &cols[header.iter().position(|h| h == "W").unwrap()];
    assert!(w.windows(2).all(|p| p[1] >= p[0] - 1e-9));
}

#[test]
fn plot_without_diagnostics_fails_with_io_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = krflab(dir.path(), ROUND, &["--quiet", "plot"]);
    assert_eq!(o.status.code(), Some(3));
}
