use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn problem(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../problems").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_optstop")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key} = ")).map(str::to_string))
}

#[test]
fn investment_threshold_with_comparator() {
    let o = run(&["solve", "--problem", problem("invest_gbm.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let p: f64 = field(&text, "solution.p_star").unwrap().parse().unwrap();
    let closed: f64 = field(&text, "closed_form_p_star").unwrap().parse().unwrap();
    assert!((p - closed).abs() <= 1e-8 * closed, "{p} vs {closed}");
    assert_eq!(field(&text, "solution.certificate.pass").as_deref(), Some("true"));
}

#[test]
fn non_existence_exits_two() {
    let o = run(&["solve", "--problem", problem("delta2.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    assert!(text.contains("solution.diagnostic.SupAtBoundary"), "{text}");
    assert_eq!(field(&text, "solution.exists").as_deref(), Some("false"));
}

#[test]
fn two_free_boundary_solutions() {
    for cmd in ["fbp", "fbp-analyze"] {
        let o = run(&[cmd, "--problem", problem("delta4.toml").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
        let text = stdout(&o);
        assert!(field(&text, "fbp.stationary_points.1.p_bar").is_some());
        assert!(field(&text, "fbp.stationary_points.2.p_bar").is_none());
        let sel: f64 = field(&text, "selected_p").unwrap().parse().unwrap();
        assert!((sel - 4.0).abs() < 1e-9);
    }
}

#[test]
fn json_report_is_machine_readable() {
    let o = run(&["invest", "--alpha", "0.03", "--sigma", "0.25", "--discount", "0.08", "--cost", "2", "--json-report"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let p = v["solution"]["p_star"].as_f64().unwrap();
    let closed = v["closed_form_p_star"].as_f64().unwrap();
    assert!((p - closed).abs() <= 1e-8 * closed);
    assert_eq!(v["certificate"]["pass"], true);
}

#[test]
fn abandonment_reports_breakeven() {
    let o = run(&["abandon", "--alpha", "-0.02", "--sigma", "0.3", "--discount", "0.1", "--revenue-cost", "1", "--salvage", "2"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(field(&text, "breakeven.below_adjusted_cost").as_deref(), Some("true"));
    assert_eq!(field(&text, "certificate.pass").as_deref(), Some("true"));
}

#[test]
fn outputs_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let file = problem("invest_gbm.toml");
    for dir in [&a, &b] {
        let o = run(&[
            "mc-check", "--problem", file.to_str().unwrap(), "--threshold", "2.6125781219484807", "--start", "1.5",
            "--paths", "2000", "--dt", "0.01", "--scheme", "exact-gbm", "--out", dir.path().to_str().unwrap(),
        ]);
        assert_ne!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
        let o = run(&["solve", "--problem", file.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    for name in ["manifest.json", "s/manifest.json", "s/h_table.csv", "s/value_table.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("s/manifest.json")).unwrap()).unwrap();
    let listed: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    let mut present: Vec<String> = fs::read_dir(a.path().join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    present.sort();
    let mut listed_sorted: Vec<String> = listed.iter().map(|s| s.to_string()).collect();
    listed_sorted.sort();
    assert_eq!(present, listed_sorted);
    assert_eq!(manifest["problem_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn schema_errors_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    let text = fs::read_to_string(problem("invest_gbm.toml")).unwrap().replace("sigma = 0.25", "sigmaa = 0.25");
    fs::write(&path, text).unwrap();
    let o = run(&["solve", "--problem", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sigmaa") && err.contains("line"), "{err}");
}

#[test]
fn usage_errors_and_help() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["solve"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["solve", "--problem", "/no/such/file.toml"]).status.code(), Some(1));
}

#[test]
fn sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep", "abandon", "--alpha", "-0.02", "--discount", "0.1", "--revenue-cost", "1", "--salvage", "2",
        "--points", "4", "--sigma-min", "0.1", "--sigma-max", "0.6", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "sigma,p_star,closed_form,certified");
    assert_eq!(rows.len(), 5);
    let p: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(p.windows(2).all(|w| w[1] < w[0]), "{p:?}");
}

#[test]
fn green_table_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["green", "--problem", problem("abandon_flow.toml").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("green.csv")).unwrap();
    assert!(csv.starts_with("x,R,I1,I2,residual\n"));
    assert_eq!(field(&stdout(&o), "certificate.pass").as_deref(), Some("true"));
}
