use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rollcall_vem::io::read_result;
use rollcall_vem::Estimator;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny_long.csv")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rollcall-vem"))
        .args(args)
        .env_remove("ROLLCALL_VEM_WORKERS")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fit_writes_a_valid_document() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fit.json");
    let o = run(&["fit", "--input", s(&fixture()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_result(&out).unwrap();
    assert_eq!(doc.estimator, Estimator::PgVem);
    assert_eq!(doc.theta.len(), 30);
    assert!(doc.theta.values().all(|t| t.estimate.is_finite() && t.se_louis.is_none()));
    assert!(doc.diagnostics.convergence_flags.fit_converged);
    assert!(doc.diagnostics.wall_time_ms.is_none());
}

#[test]
fn se_attaches_louis_and_bootstrap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("se.json");
    let o = run(&[
        "--seed",
        "3",
        "se",
        "--input",
        s(&fixture()),
        "--method",
        "both",
        "--replicates",
        "20",
        "--mc-samples",
        "500",
        "--out",
        s(&out),
    ]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_result(&out).unwrap();
    assert!(doc.theta.values().any(|t| t.se_louis.is_some()));
    assert!(doc.theta.values().all(|t| t.se_bootstrap.is_some()));
    assert_eq!(doc.config_echo.louis.mc_samples, 500);
    assert_eq!(doc.config_echo.bootstrap.replicates, 20);
}

#[test]
fn same_seed_same_bytes_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for (workers, out) in [("1", &a), ("3", &b)] {
        let o = run(&["--workers", workers, "se", "--input", s(&fixture()), "--out", s(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let votes = dir.path().join("sim.csv");
    let o = run(&["simulate", "--legislators", "25", "--bills", "40", "--out", s(&votes)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("sim_truth.csv").exists());

    let result = dir.path().join("pg.json");
    let o = run(&["se", "--input", s(&votes), "--mc-samples", "300", "--out", s(&result)]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", String::from_utf8_lossy(&o.stderr));

    let plots = dir.path().join("plots");
    let o = run(&[
        "report",
        "--result",
        s(&result),
        "--input",
        s(&votes),
        "--truth",
        s(&dir.path().join("sim_truth.csv")),
        "--out",
        s(&plots),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(plots.join("pg_estimates.csv").exists());
    assert!(plots.join("pg_estimate_vs_truth.svg").exists());
    assert!(plots.join("pg_estimate_vs_se_louis.svg").exists());
}

#[test]
fn matrix_format_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let votes = dir.path().join("sim.csv");
    let o = run(&["simulate", "--legislators", "20", "--bills", "30", "--format", "matrix", "--out", s(&votes)]);
    assert_eq!(o.status.code(), Some(0));
    let out = dir.path().join("jj.json");
    let o = run(&["fit", "--input", s(&votes), "--format", "matrix", "--estimator", "jj-vem", "--out", s(&out)]);
    assert!(matches!(o.status.code(), Some(0 | 3)), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_result(&out).unwrap().estimator, Estimator::JjVem);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["fit", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "member_id,bill_id,cast_code\nA,1,1\nA,2,42\n").unwrap();
    let o = run(&["fit", "--input", s(&bad), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = run(&["fit", "--input", s(&dir.path().join("missing.csv")), "--out", s(&dir.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 9\n[louis]\nmc_samples = 250\n").unwrap();
    let out = dir.path().join("se.json");
    let o = run(&["--config", s(&cfg), "se", "--input", s(&fixture()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_result(&out).unwrap();
    assert_eq!(doc.config_echo.seed, 9);
    assert_eq!(doc.config_echo.louis.mc_samples, 250);
    assert_eq!(doc.config_echo.louis.seed, 9);

    std::fs::write(&cfg, "[louis]\nmc_samples = 5\n").unwrap();
    let o = run(&["--config", s(&cfg), "se", "--input", s(&fixture()), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
