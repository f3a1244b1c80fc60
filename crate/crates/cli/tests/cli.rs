use std::path::Path;
use std::process::{Command, Output};

const TINY_LP: &str = "\\ path\nMinimize\n obj: - x1 - x2 - x3\nSubject To\n c1: x1 + x2 <= 1\n c2: x2 + x3 <= 1\nBinary\n x1 x2 x3\nEnd\n";

fn doge(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doge"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn version_reports_build() {
    let t = tempfile::tempdir().unwrap();
    let o = doge(&["--version"], t.path());
    ok(&o);
    assert!(stdout(&o).starts_with("doge 0.1.0 ("));
}

#[test]
fn gen_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    for d in ["a", "b"] {
        ok(&doge(
            &[
                "gen", "--count", "3", "--n", "10", "--p", "0.25", "--seed", "1", "--out", d,
            ],
            t.path(),
        ));
    }
    let a = dir_bytes(&t.path().join("a"));
    assert_eq!(a.len(), 4);
    assert_eq!(a, dir_bytes(&t.path().join("b")));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("a/manifest.json")).unwrap()).unwrap();
    let seeds: Vec<u64> = manifest["instances"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["seed"].as_u64().unwrap())
        .collect();
    assert_eq!(seeds, vec![1, 2, 3]);
}

#[test]
fn gen_without_edges_is_flagged() {
    let t = tempfile::tempdir().unwrap();
    ok(&doge(
        &["gen", "--count", "2", "--n", "5", "--p", "0", "--out", "d"],
        t.path(),
    ));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(t.path().join("d/manifest.json")).unwrap()).unwrap();
    for e in manifest["instances"].as_array().unwrap() {
        assert_eq!(e["constraints"], 0);
        assert_eq!(e["unconstrained"], true);
    }
}

#[test]
fn gen_rejects_bad_probability() {
    let t = tempfile::tempdir().unwrap();
    let o = doge(&["gen", "--p", "1.5", "--out", "d"], t.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solve_tiny() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("tiny.lp"), TINY_LP).unwrap();
    let o = doge(
        &["solve", "tiny.lp", "--sweeps", "50", "--out", "c.csv"],
        t.path(),
    );
    ok(&o);
    let bound: f64 = stdout(&o).trim().parse().unwrap();
    assert!((bound + 2.0).abs() <= 1e-6);
    let csv = std::fs::read_to_string(t.path().join("c.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sweep,seconds,lower_bound"));
    assert_eq!(lines.count(), 51);
}

#[test]
fn solve_zero_sweeps_has_init_row_only() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("tiny.lp"), TINY_LP).unwrap();
    let o = doge(&["solve", "tiny.lp", "--sweeps", "0"], t.path());
    ok(&o);
    assert_eq!(stdout(&o), "sweep,seconds,lower_bound\n0,0,-2\n");
}

#[test]
fn solve_bad_input_exits_2() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("bad.lp"),
        "Minimize\n obj: x1\nSubject To\n c1: x1 + x2 < 1\nEnd\n",
    )
    .unwrap();
    assert_eq!(doge(&["solve", "bad.lp"], t.path()).status.code(), Some(2));
    // x1 = 2 has no 0-1 solution.
    let infeasible =
        r#"{"n":1,"c":[1.0],"constraints":[{"vars":[0],"coeffs":[1.0],"rel":"eq","rhs":2.0}]}"#;
    std::fs::write(t.path().join("inf.json"), infeasible).unwrap();
    assert_eq!(
        doge(&["solve", "inf.json"], t.path()).status.code(),
        Some(2)
    );
    assert_eq!(
        doge(&["solve", "missing.json"], t.path()).status.code(),
        Some(2)
    );
}

#[test]
fn unknown_flag_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(
        doge(&["solve", "x.lp", "--bogus"], t.path()).status.code(),
        Some(2)
    );
}

#[test]
fn train_and_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&doge(
        &[
            "gen", "--count", "3", "--n", "10", "--seed", "4", "--out", "d",
        ],
        p,
    ));
    ok(&doge(
        &[
            "train", "--data", "d", "--iters", "4", "--rounds", "4", "--sweeps", "3", "--out",
            "w.bin", "--log", "log.csv",
        ],
        p,
    ));
    let log = std::fs::read_to_string(p.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);
    assert!(log.starts_with("iter,loss,mean_rounds,grad_norm_early,grad_norm_late\n"));
    let o = doge(
        &[
            "eval",
            "--data",
            "d",
            "--weights",
            "w.bin",
            "--rounds",
            "4",
            "--sweeps",
            "3",
            "--out",
            "e.csv",
        ],
        p,
    );
    ok(&o);
    let csv = std::fs::read_to_string(p.join("e.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("instance,method,E,t_best,g_I"));
    let rows: Vec<Vec<String>> = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 3 * 2 + 2);
    for r in &rows {
        assert_eq!(r.len(), 5);
        for field in &r[2..] {
            let x: f64 = field.parse().unwrap();
            assert_eq!(format!("{x}"), *field, "floats print losslessly");
        }
    }
    assert_eq!(rows[6][0], "mean");
}

#[test]
fn eval_rejects_corrupt_weights() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&doge(&["gen", "--count", "1", "--n", "8", "--out", "d"], p));
    std::fs::write(p.join("w.bin"), b"not weights").unwrap();
    assert_eq!(
        doge(&["eval", "--data", "d", "--weights", "w.bin"], p)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn train_rejects_bad_config() {
    let t = tempfile::tempdir().unwrap();
    let p = t.path();
    ok(&doge(&["gen", "--count", "1", "--n", "8", "--out", "d"], p));
    let o = doge(
        &["train", "--data", "d", "--rounds", "1", "--out", "w.bin"],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
    let o = doge(
        &["train", "--data", "d", "--arch", "nope", "--out", "w.bin"],
        p,
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_suites_and_faults() {
    let t = tempfile::tempdir().unwrap();
    let o = doge(&["check", "--suite", "metrics"], t.path());
    ok(&o);
    assert!(stdout(&o).contains("metrics        pass"));
    let o = doge(
        &["check", "--suite", "gradient", "--inject", "grad-sign"],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    let o = doge(
        &[
            "check",
            "--suite",
            "feasibility",
            "--inject",
            "live-snapshot",
        ],
        t.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = doge(&["check", "--suite", "nope"], t.path());
    assert_eq!(o.status.code(), Some(2));
}
