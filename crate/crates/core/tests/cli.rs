use std::fs;
use std::process::Command;

fn kdpe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kdpe"))
}

#[test]
fn simulate_then_fit_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdpe()
        .args(["simulate", "--n", "60", "--seed", "4", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let path = String::from_utf8(out.stdout).unwrap().trim().to_string();
    assert!(path.ends_with("dgp1_n60_seed4.csv"));

    let fit = kdpe()
        .args(["fit", "--methods", "kdpe,naive", "--trace", "--data", &path, "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(fit.status.code(), Some(0), "{}", String::from_utf8_lossy(&fit.stderr));
    let csv = fs::read_to_string(dir.path().join("fit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(dir.path().join("kdpe_model.json").exists());
    assert!(dir.path().join("kdpe_trace.jsonl").exists());
}

#[test]
fn benchmark_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdpe()
        .args(["benchmark", "--n", "50", "--sims", "3", "--methods", "kdpe,tmle,naive", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(matches!(out.status.code(), Some(0 | 3)));
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert_eq!(
        results.lines().next().unwrap(),
        "sim_id,method,target,estimate,true_value,iterations,converged,seconds"
    );
    assert_eq!(results.lines().count(), 1 + 3 * 3 * 3);
    for f in ["summary.json", "histogram.csv", "config.toml"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn bad_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = kdpe()
        .args(["fit", "--methods", "ltmle", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "sims = 0\n[dgp]\nkind = \"dgp1\"\nn = 10\nseed = 1\n").unwrap();
    let out = kdpe().args(["benchmark", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
