use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn coco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coco"))
        .args(args)
        .output()
        .expect("run coco")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_case5_writes_one_csv_per_environment_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let out = coco(&["gen", "--case", "case5", "--envs", "0.5,2", "--n", "200", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for e in 0..2 {
        let text = fs::read_to_string(dir.path().join(format!("env{e}.csv"))).unwrap();
        assert_eq!(text.lines().next().unwrap(), "y,x1,z");
        assert_eq!(text.lines().count(), 201);
    }
    let meta = json(&dir.path().join("metadata.json"));
    assert_eq!(meta["beta"], serde_json::json!([2.0, 0.0]));
    assert_eq!(meta["support"], serde_json::json!([1]));
    assert_eq!(meta["environments"].as_array().unwrap().len(), 2);
}

#[test]
fn gen_gmm_has_eight_covariates_and_integer_labels() {
    let dir = tempfile::tempdir().unwrap();
    let out = coco(&["gen", "--case", "gmm", "--n", "300", "--out", s(dir.path())]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(dir.path().join("env0.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "y,x1,x2,x3,x4,x5,z1,z2,z3");
    for line in lines {
        let label: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert!(label.fract() == 0.0 && (0.0..5.0).contains(&label), "label {label}");
    }
}

#[test]
fn gen_is_byte_identical_for_the_same_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let out = coco(&["gen", "--case", "case2", "--seed", "11", "--n", "100", "--out", s(d.path())]);
        assert_eq!(code(&out), 0);
    }
    for name in ["env0.csv", "env1.csv", "metadata.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs"
        );
    }
}

fn fit_case5(method: &str) -> Value {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert_eq!(code(&coco(&["gen", "--case", "case5", "--seed", "4", "--out", s(data.path())])), 0);
    let run = coco(&["fit", "--data", s(data.path()), "--method", method, "--out", s(out.path())]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let trace = fs::read_to_string(out.path().join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,objective"));
    json(&out.path().join("fit.json"))
}

#[test]
fn fit_coco_modified_recovers_case5() {
    let report = fit_case5("coco-modified");
    let mae = report["mae"].as_f64().unwrap();
    assert!(mae < 0.1, "mae {mae}");
}

#[test]
fn fit_erm_is_biased_on_case5() {
    let report = fit_case5("erm");
    let mae = report["mae"].as_f64().unwrap();
    assert!(mae > 0.2, "mae {mae}");
}

#[test]
fn fit_with_missing_data_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = coco(&["fit", "--data", s(&dir.path().join("missing")), "--out", s(&out)]);
    assert_eq!(code(&run), 1);
    assert!(!out.exists());
}

#[test]
fn divergence_exits_with_numerical_status() {
    let dir = tempfile::tempdir().unwrap();
    let run = coco(&[
        "fit",
        "--case",
        "case5",
        "--n",
        "500",
        "--method",
        "erm",
        "--out",
        s(dir.path()),
        "optim.batch_size=50",
        "optim.step_size=100",
        "optim.max_iters=200",
    ]);
    assert_eq!(code(&run), 2);
    let report = json(&dir.path().join("fit.json"));
    assert_eq!(report["diverged"], Value::Bool(true));
}

#[test]
fn check_case5_streaming_passes_at_two_environments() {
    let dir = tempfile::tempdir().unwrap();
    let run = coco(&["check", "--case", "case5", "--nondescendants", "1", "--out", s(dir.path())]);
    assert_eq!(code(&run), 0);
    let report = json(&dir.path().join("check.json"));
    assert_eq!(report["rank_check"]["passes"], Value::Bool(true));
    assert_eq!(report["environments_used"].as_u64(), Some(2));
}

#[test]
fn check_nonidentifiable_reports_failure_with_rank_below_p() {
    let dir = tempfile::tempdir().unwrap();
    let run = coco(&["check", "--case", "nonidentifiable", "--out", s(dir.path())]);
    assert_eq!(code(&run), 0);
    let report = json(&dir.path().join("check.json"));
    assert_eq!(report["rank_check"]["passes"], Value::Bool(false));
    assert!(report["rank_check"]["rank"].as_u64().unwrap() < 3);
}

#[test]
fn check_with_empty_nondescendants_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = coco(&["check", "--case", "case5", "--nondescendants", "", "--out", s(dir.path())]);
    assert_eq!(code(&run), 1);
    assert!(!dir.path().join("check.json").exists());
}

#[test]
fn check_static_data_uses_metadata_nondescendants() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert_eq!(code(&coco(&["gen", "--case", "case5", "--out", s(data.path())])), 0);
    let run = coco(&["check", "--data", s(data.path()), "--out", s(out.path())]);
    assert_eq!(code(&run), 0);
    let report = json(&out.path().join("check.json"));
    assert_eq!(report["nondescendants"], serde_json::json!([1]));
    assert_eq!(report["streaming"], Value::Bool(false));
}

fn small_bench(out: &Path) -> Output {
    coco(&[
        "bench",
        "linear-cases",
        "--reps",
        "1",
        "--n",
        "2000",
        "--out",
        s(out),
        "bench.cases=case5",
        "bench.methods=erm,coco",
        "optim.max_iters=20000",
    ])
}

#[test]
fn single_replication_bench_has_zero_sd_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_bench(a.path())), 0);
    assert_eq!(code(&small_bench(b.path())), 0);
    let report = json(&a.path().join("linear-cases.json"));
    let rows = report["mae"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["sd"].as_f64(), Some(0.0));
    }
    for name in ["linear-cases.json", "linear-cases.csv"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn report_prints_bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&small_bench(dir.path())), 0);
    let run = coco(&["report", s(&dir.path().join("linear-cases.json"))]);
    assert_eq!(code(&run), 0);
    let text = String::from_utf8(run.stdout).unwrap();
    assert!(text.contains("case5") && text.contains("coco"), "{text}");
}

#[test]
fn report_rejects_non_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    fs::write(&path, "{\"a\": 1}").unwrap();
    assert_eq!(code(&coco(&["report", s(&path)])), 1);
}

#[test]
fn bench_rejects_unknown_suite() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&coco(&["bench", "nope", "--out", s(dir.path())])), 1);
}

#[test]
fn config_file_is_overridden_by_flags_and_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    fs::write(&cfg, "# case 5 with two environments\ncase = case1\nn = 150\nenvs = 0.5, 2\n").unwrap();
    let out = dir.path().join("data");
    let run = coco(&["gen", "--config", s(&cfg), "--case", "case5", "--out", s(&out), "n=120"]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = fs::read_to_string(out.join("env0.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "y,x1,z");
    assert_eq!(text.lines().count(), 121);
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let run = coco(&["gen", "--case", "case5", "--out", s(dir.path()), "optim.stepsize=1"]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("optim.stepsize"));
}

#[test]
fn invalid_scenario_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&coco(&["gen", "--case", "case9", "--out", s(dir.path())])), 1);
    assert_eq!(code(&coco(&["gen", "--case", "case1", "--envs", "-1", "--out", s(dir.path())])), 1);
}
