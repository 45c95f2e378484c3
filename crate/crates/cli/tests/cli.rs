use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hlqr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hlqr"))
        .args(args)
        .env("HLQR_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = hlqr(args);
    assert!(
        out.status.success(),
        "hlqr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Parses the single data row of a report CSV into (header, row) pairs.
fn row(csv: &str) -> Vec<(String, String)> {
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let rec = rdr.records().next().unwrap().unwrap();
    headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect()
}

fn field<'a>(row: &'a [(String, String)], name: &str) -> &'a str {
    &row.iter().find(|(h, _)| h == name).unwrap().1
}

#[test]
fn run_clique_clusters_reports_table_metrics() {
    let r = row(&ok(&["run", "clique-path", "--s", "3", "--c", "3", "--clusters", "cliques", "--no-timing"]));
    assert_eq!(field(&r, "kappa"), "9");
    assert_eq!(field(&r, "trace_g2"), "4.0");
    assert_eq!(field(&r, "n_c"), "27");
    assert_eq!(field(&r, "learn_time"), "");
    assert!(field(&r, "sop").parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn run_kappa_objective_reaches_fifteen() {
    let r = row(&ok(&["run", "clique-path", "--s", "3", "--c", "3", "--objective", "kappa", "--model-based"]));
    assert_eq!(field(&r, "kappa"), "15");
    assert_eq!(field(&r, "n_c"), "21");
}

#[test]
fn run_formation_is_feasible_with_nonnegative_gap() {
    let out = hlqr(&["run", "formation", "--dec", "6,3,3", "--model-based"]);
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.matches("-> feasible").count(), 3, "{stderr}");
    let r = row(&String::from_utf8(out.stdout).unwrap());
    assert!(field(&r, "sop").parse::<f64>().unwrap() >= 0.0);
}

#[test]
fn decompose_writes_json_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let csv = ok(&["decompose", "clique-path", "--objective", "scut", "--clusters", "3", "--out", out]);
    let r = row(&csv);
    assert_eq!(field(&r, "trace_g2"), "4.0");
    assert_eq!(field(&r, "optimal"), "true");
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("decomposition.json")).unwrap()).unwrap();
    assert_eq!(json["assignment"], serde_json::json!([1, 1, 1, 2, 2, 2, 3, 3, 3]));
    assert_eq!(fs::read_to_string(dir.path().join("metrics.csv")).unwrap(), csv);
}

#[test]
fn determinism_byte_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&[
            "run", "clique-path", "--c", "2", "--clusters", "cliques", "--seed", "7", "--no-timing", "--out",
            d.to_str().unwrap(),
        ]);
    }
    for name in ["report.csv", "gain_kh.csv", "r_tilde.csv", "decomposition.json"] {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
    }
    let config = |d: &Path| {
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join("config.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("output_dir");
        v
    };
    assert_eq!(config(a.path()), config(b.path()));
}

#[test]
fn solve_emits_gain_and_gap_report() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["solve", "clique-path", "--clusters", "cliques", "--samples", "50", "--out", dir.path().to_str().unwrap()]);
    let gap: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("gap_report.json")).unwrap()).unwrap();
    assert!(gap["delta_j"].as_f64().unwrap() >= 0.0);
    assert!(gap["trace_v"].as_f64().unwrap() <= gap["trace_v_bound"].as_f64().unwrap());
    let k = fs::read_to_string(dir.path().join("gain_kh.csv")).unwrap();
    assert_eq!(k.lines().count(), 18);
    assert_eq!(k.lines().next().unwrap().split(',').count(), 36);
}

#[test]
fn learn_summary_matches_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&[
        "learn", "clique-path", "--c", "2", "--clusters", "cliques", "--no-timing", "--out", dir.path().to_str().unwrap(),
    ]);
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let idx = rdr.headers().unwrap().iter().position(|h| h == "p_rel_error").unwrap();
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        assert!(r[idx].parse::<f64>().unwrap() < 1e-3);
    }
    assert!(dir.path().join("p_hat_3.csv").exists());
}

#[test]
fn simulate_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let csv = ok(&[
        "simulate", "formation", "--controller", "baseline", "--t-max", "5", "--out", dir.path().to_str().unwrap(),
    ]);
    let r = row(&csv);
    assert_eq!(field(&r, "controller"), "baseline");
    let traj = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert!(traj.lines().count() > 10);
}

#[test]
fn run_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    let out = dir.path().join("out");
    fs::write(
        &cfg,
        r#"{
            "scenario": {"kind": "clique_path", "s_cliques": 3, "c": 3, "n": 4, "m": 2},
            "decomposition": {"kind": "explicit", "assignment": [1,1,2,2,2,2,2,3,3]},
            "evaluation": {"scheme": {"kind": "normal", "variance": 0.5}, "samples": 100, "seed": 3}
        }"#,
    )
    .unwrap();
    let r = row(&ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    assert_eq!(field(&r, "kappa"), "4");
    assert_eq!(field(&r, "n_c"), "32");
    assert!(Path::new(&out.join("report.csv")).exists());
}

#[test]
fn bench_decomposition_compare_model_based() {
    let out = ok(&["bench", "decomposition-compare", "--model-based", "--samples", "100"]);
    let body: String = out.lines().skip(1).collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let rows: Vec<_> = rdr.records().map(Result::unwrap).collect();
    let kt: Vec<(String, String)> = rows.iter().map(|r| (r[1].to_string(), r[2].to_string())).collect();
    assert_eq!(kt[..3], [("4".into(), "8.0".into()), ("9".into(), "4.0".into()), ("15".into(), "6.0".into())]);
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let out = hlqr(&["run", "/nonexistent/scenario.json", "--clusters", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));

    let out = hlqr(&["decompose", "clique-path", "--clusters", "12"]);
    assert!(!out.status.success());

    let out = Command::new(env!("CARGO_BIN_EXE_hlqr"))
        .args(["solve", "clique-path"])
        .env("HLQR_WORKERS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("HLQR_WORKERS"));
}
