use std::fs;
use std::process::{Command, Output};

fn lbdnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lbdnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&lbdnn(&["--help"])), 0);
    assert_eq!(code(&lbdnn(&["--version"])), 0);
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&lbdnn(&["simulate", "--no-such-flag"])), 1);
    assert_eq!(code(&lbdnn(&[])), 1);
    assert_eq!(code(&lbdnn(&["lemma-check", "--ou", "a=1", "tau=2"])), 1);
}

#[test]
fn missing_config_names_the_path() {
    let o = lbdnn(&["simulate", "--config", "/no/such/run.json"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/run.json"));
}

#[test]
fn config_without_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    fs::write(&p, r#"{"k_e": 100}"#).unwrap();
    let o = lbdnn(&["certify", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn simulate_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = lbdnn(&[
        "simulate", "--benchmark", "--horizon", "0.5", "--stride", "10", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,x1,x2,x3,x4,x5,e1,e2,e3,e4,e5,u1,u2,u3,u4,u5,norm_e,norm_th1,norm_th2,norm_th3,VL"
    );
    assert_eq!(lines.count(), 51);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["diverged"], false);
    assert_eq!(summary["config_hash"].as_str().unwrap().len(), 64);
    assert!(fs::read_to_string(out.join("tracking_error.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn large_step_warns_and_divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdnn(&[
        "simulate", "--benchmark", "--ke", "3000", "--horizon", "0.2", "--quiet", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert_eq!(code(&o), 2);
}

#[test]
fn certify_prints_json_and_flags_infeasibility() {
    let o = lbdnn(&["certify", "--benchmark"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["alpha1"], 0.02);
    assert_eq!(v["alpha2"], 1.0);
    assert_eq!(v["feasibility_ok"], true);

    let o = lbdnn(&["certify", "--benchmark", "--chi", "10"]);
    assert_eq!(code(&o), 3);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["feasibility_ok"], false);
}

#[test]
fn gradcheck_threshold_controls_exit() {
    assert_eq!(code(&lbdnn(&["gradcheck", "--trials", "5", "--quiet"])), 0);
    assert_eq!(code(&lbdnn(&["gradcheck", "--trials", "5", "--threshold", "0", "--quiet"])), 3);
}

#[test]
fn lemma_check_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let o = lbdnn(&[
        "lemma-check", "--ou", "a=1", "sigma=0.5", "--m", "0.5", "--fractions", "0.25", "--paths", "2000",
        "--horizon", "2", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3);
    let csv = fs::read_to_string(dir.path().join("lemma_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("a,sigma,m,lambda,empirical,ci_lo,ci_hi,bound\n"));

    let o = lbdnn(&["lemma-check", "--ou", "a=1", "sigma=0.25", "--m", "2", "--fractions", "1", "--paths", "500", "--horizon", "1"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_lbdnn"))
        .args(["certify", "--benchmark"])
        .env("LBDNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}
