use std::path::Path;
use std::process::{Command, Output};

fn koopman(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_koopman"))
        .args(args)
        .env_remove("KOOPMAN_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn f(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn spectrum_reports_saddle_and_verdicts() {
    let o = koopman(&["spectrum", "--system", "example-b"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("saddle"), "{out}");
    assert!(out.contains("1.000000") && out.contains("-1.000000"), "{out}");

    let out = stdout(&koopman(&["spectrum", "--system", "test-c"]));
    assert!(out.contains("stable"), "{out}");
    let verdicts: Vec<&str> = out.lines().filter_map(|l| l.split_whitespace().last()).filter(|w| *w == "true" || *w == "false").collect();
    assert_eq!(verdicts, ["true", "false"], "{out}");
}

#[test]
fn unknown_system_is_a_config_error() {
    let o = koopman(&["spectrum", "--system", "example-z"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("example-z"));
}

#[test]
fn malformed_config_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "method = \"infinite\"\ngrid = [unterminated\n").unwrap();
    let o = koopman(&["spectrum", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn infinite_eigfun_on_test_c() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("phi.csv");
    let o = koopman(&[
        "eigfun", "--system", "test-c", "--lambda", "-1", "--method", "infinite", "--grid", "-1:1:3,-1:1:3", "-o",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out);
    assert_eq!(header, ["x1", "x2", "phi_re", "phi_im", "h_re", "h_im", "t_exit", "status", "err_bound"]);
    assert_eq!(rows.len(), 9);
    let (x1, x2, phi) = (col(&header, "x1"), col(&header, "x2"), col(&header, "phi_re"));
    for row in &rows {
        let (a, b) = (f(&row[x1]), f(&row[x2]));
        // Closed form x1 + x2^2/3.
        assert!((f(&row[phi]) - (a + b * b / 3.0)).abs() < 1e-6, "{row:?}");
        if a == 0.0 && b == 0.0 {
            assert_eq!(f(&row[phi]), 0.0);
        }
    }
    let at = rows.iter().find(|r| f(&r[x1]) == 0.0 && f(&r[x2]) == 1.0).unwrap();
    assert!((f(&at[phi]) - 1.0 / 3.0).abs() < 1e-6);
    assert!(out.with_extension("json").exists());
}

#[test]
fn infinite_method_on_a_saddle_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("phi.csv");
    let o = koopman(&["eigfun", "--system", "example-b", "--lambda", "1", "--method", "infinite", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn runs_are_deterministic_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |p: &Path| {
        vec![
            "eigfun".to_string(),
            "--system".into(),
            "example-b".into(),
            "--lambda".into(),
            "1".into(),
            "--method".into(),
            "finite_transform".into(),
            "--grid".into(),
            "-1:1:5,-1:1:5".into(),
            "-o".into(),
            p.to_str().unwrap().into(),
        ]
    };
    let run = |p: &Path, threads: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_koopman")).args(args(p)).env("KOOPMAN_THREADS", threads).output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(&a, "1");
    run(&b, "4");
    let first = std::fs::read(&a).unwrap();
    assert_eq!(first, std::fs::read(&b).unwrap());

    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "eigfun");
    assert_eq!(sidecar["config_sha256"].as_str().unwrap().len(), 64);

    // Replaying the sidecar writes to the recorded output path again.
    std::fs::remove_file(&a).unwrap();
    let o = koopman(&["eigfun", "--config", a.with_extension("json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(first, std::fs::read(&a).unwrap());
}

#[test]
fn mostly_failed_grid_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("phi.csv");
    let o = koopman(&[
        "eigfun", "--system", "example-b", "--lambda", "1", "--method", "finite_transform", "--grid", "-1:1:3,-1:1:3",
        "--t-max", "0.01", "-o", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out);
    let status = col(&header, "status");
    assert!(rows.iter().filter(|r| r[status] != "ok").count() * 10 > rows.len());
}

#[test]
fn control_curve_matches_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("u.csv");
    let o = koopman(&["control", "--system", "example-b", "--x1", "-1:1:3", "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out);
    assert_eq!(header, ["x1", "gamma", "u", "u_analytic", "abs_err", "status"]);
    let (x1, gamma, u) = (col(&header, "x1"), col(&header, "gamma"), col(&header, "u"));
    let origin = rows.iter().find(|r| f(&r[x1]) == 0.0).unwrap();
    assert_eq!(f(&origin[gamma]), 0.0);
    assert_eq!(f(&origin[u]), 0.0);
    let one = rows.iter().find(|r| f(&r[x1]) == 1.0).unwrap();
    let want = 1.0 - 2.0f64.sqrt();
    assert!((f(&one[col(&header, "u_analytic")]) - want).abs() < 1e-12);
    assert!((f(&one[u]) - want).abs() < 1e-6, "{one:?}");
}

#[test]
fn external_system_from_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sys.toml");
    std::fs::write(&cfg, "[system]\nname = \"cubic\"\nequations = [\"-x1 + x2^2\", \"-2*x2\"]\n").unwrap();
    let o = koopman(&["spectrum", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("cubic") && out.contains("stable"), "{out}");
}

#[test]
fn verify_fast_passes() {
    let o = koopman(&["verify", "--fast"]);
    let out = stdout(&o);
    assert!(o.status.success(), "{out}\n{}", stderr(&o));
    for id in ["AC2", "AC5", "AC6", "AC7"] {
        assert!(out.lines().any(|l| l.starts_with("PASS") && l.contains(id)), "{out}");
    }
}
