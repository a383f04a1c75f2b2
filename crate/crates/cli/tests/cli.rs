use std::path::Path;
use std::process::Command;

fn hierperc(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hierperc"))
        .arg("--out")
        .arg(dir)
        .args(args)
        .env_remove("HIERPERC_SEED")
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn same_seed_same_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--beta", "0.6", "--seed", "11", "moments", "--n", "5,7", "--reps", "300"];
    assert_eq!(hierperc(a.path(), &args).0, 0);
    assert_eq!(hierperc(b.path(), &args).0, 0);
    assert_eq!(read(a.path(), "moments.csv"), read(b.path(), "moments.csv"));

    let other = tempfile::tempdir().unwrap();
    let args = ["--beta", "0.6", "--seed", "12", "moments", "--n", "5,7", "--reps", "300"];
    assert_eq!(hierperc(other.path(), &args).0, 0);
    assert_ne!(read(a.path(), "moments.csv"), read(other.path(), "moments.csv"));
}

#[test]
fn seed_from_environment() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(hierperc(a.path(), &["--seed", "5", "--beta", "0.5", "sample", "--n", "6", "--reps", "3"]).0, 0);
    let out = Command::new(env!("CARGO_BIN_EXE_hierperc"))
        .args(["--out", b.path().to_str().unwrap(), "--beta", "0.5", "sample", "--n", "6", "--reps", "3"])
        .env("HIERPERC_SEED", "5")
        .status()
        .unwrap();
    assert!(out.success());
    assert_eq!(read(a.path(), "sample.csv"), read(b.path(), "sample.csv"));
}

#[test]
fn sidecar_records_run() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        hierperc(d.path(), &["--seed", "2", "coalescent", "--masses", "1,1,2", "--t", "0.3", "--reps", "500"]).0,
        0
    );
    let v: serde_json::Value = serde_json::from_str(&read(d.path(), "coalescent.json")).unwrap();
    assert_eq!(v["schema"], "hierperc/1");
    assert_eq!(v["command"], "coalescent");
    assert_eq!(v["seed"], 2);
    assert!(v["wall_time_s"].as_f64().unwrap() >= 0.0);
    let csv = read(d.path(), "coalescent.csv");
    assert!(csv.starts_with("p,estimate,stderr,replicas,exact"));
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn invalid_input_exits_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(hierperc(d.path(), &["--beta=-1", "moments", "--n", "4"]).0, 2);
    assert_eq!(hierperc(d.path(), &["--L", "1", "--beta", "1", "moments", "--n", "4"]).0, 2);
    assert_eq!(hierperc(d.path(), &["--beta", "1", "moments", "--n", "4", "--t", "1.5"]).0, 2);
    assert_eq!(hierperc(d.path(), &["--beta", "soon", "moments", "--n", "4"]).0, 2);
    assert_eq!(hierperc(d.path(), &["nosuchcommand"]).0, 2);
    assert_eq!(hierperc(d.path(), &["coalescent", "--masses", "1,0", "--t", "1"]).0, 2);
}

#[test]
fn config_file_overrides_flags() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(&cfg, "seed = 9\nbeta = \"0.4\"\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(hierperc(d.path(), &["--config", cfg, "--seed", "1", "sample", "--n", "5", "--reps", "2"]).0, 0);
    let v: serde_json::Value = serde_json::from_str(&read(d.path(), "sample.json")).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["beta"]["value"], 0.4);
    assert_eq!(v["beta"]["source"], "given");
}

#[test]
fn cached_critical_point_is_reused() {
    let d = tempfile::tempdir().unwrap();
    let cache =
        r#"{"d=1,L=2,alpha=0.5,tolerance=0.05":{"lower":0.75,"upper":0.78125,"estimate":0.77,"converged":true}}"#;
    std::fs::write(d.path().join("betac-cache.json"), cache).unwrap();
    assert_eq!(hierperc(d.path(), &["sample", "--n", "4"]).0, 0);
    let v: serde_json::Value = serde_json::from_str(&read(d.path(), "sample.json")).unwrap();
    assert_eq!(v["beta"]["source"], "cache");
    assert_eq!(v["beta"]["value"], 0.77);
}

#[test]
fn search_out_of_budget_is_inconclusive() {
    let d = tempfile::tempdir().unwrap();
    let (code, _) =
        hierperc(d.path(), &["--alpha", "0.5", "--budget", "1000", "betac", "--n-start", "8", "--n-max", "8"]);
    assert_eq!(code, 3);
}

#[test]
fn verify_passes() {
    let d = tempfile::tempdir().unwrap();
    let (code, err) = hierperc(d.path(), &["--seed", "1", "verify"]);
    assert_eq!(code, 0, "{err}");
    assert!(!err.contains("FAIL"));
}
