use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nonlocal-acf"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn constants_report_contains_a_ns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "consts.toml", "claim = \"constants\"\nn = 2\ns = 0.5\n");
    let out = dir.path().join("out");
    let o = run(&["constants", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("consts.json")).unwrap()).unwrap();
    let a = report["summary"]
        .as_array()
        .unwrap()
        .iter()
        .find(|q| q["name"] == "a_ns")
        .unwrap()["value"]
        .as_f64()
        .unwrap();
    assert!((a - 0.101321).abs() < 1e-6, "{a}");
    assert_eq!(report["schema_version"], 1);
    assert!(out.join("consts.csv").exists());
}

#[test]
fn constant_field_monotonicity_passes_with_zero_defect() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "flat.toml",
        "claim = \"monotonicity-G\"\nfield = \"const:v=1\"\ns = 0.5\nradii = [0.25, 0.5]\n",
    );
    let o = run(&["monotonicity", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn unmet_sign_condition_exits_with_two() {
    // G of the even bump at s = 1/2 has (-Delta)^s G_u(0) > 0.
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "hyp.toml",
        "claim = \"monotonicity-G\"\nfield = \"bump:r=1\"\ns = 0.5\nradii = [0.2, 0.4]\n",
    );
    let o = run(&["monotonicity", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
}

#[test]
fn errors_exit_with_one_and_name_the_module() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write(dir.path(), "bad.toml", "claim = \"routes\"\nfield = \"nope\"\ns = 0.5\nradii = [1.0]\n");
    let o = run(&["scaling", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fields:"), "{}", stderr(&o));

    let o = run(&["bound", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("runs under `scaling`"), "{}", stderr(&o));

    let cfg = write(dir.path(), "typo.toml", "claim = \"constants\"\nss = 0.5\n");
    let o = run(&["constants", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));
}

#[test]
fn empty_manifest_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let m = write(dir.path(), "empty.manifest", "# nothing here\n");
    let o = run(&["verify-all", m.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 experiments"));
}

#[test]
fn missing_manifest_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["verify-all", dir.path().join("none").to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn failing_manifest_names_the_claim() {
    // The closed form of the moment integral is off for n = 2, k = 2.
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ok.toml", "claim = \"constants\"\nn = 1\ns = 0.5\n");
    write(dir.path(), "moments22.toml", "claim = \"moments\"\ndims = [2]\norders = [2]\ns = 0.5\n");
    let m = write(dir.path(), "suite.manifest", "ok.toml\nmoments22.toml\n");
    let out = dir.path().join("out");
    let o = run(&["verify-all", m.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("1 passed, 1 failed"), "{text}");
    assert!(text.contains("failing: moments22"), "{text}");
    assert!(out.join("summary.json").exists());
}

#[test]
fn reruns_are_byte_identical_and_the_cache_dir_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "oracles.toml",
        "claim = \"oracles\"\nfield = \"gaussian:w=1\"\ns = 0.4\nrandom_points = 5\nseed = 3\n",
    );
    let routes = write(
        dir.path(),
        "routes.toml",
        "claim = \"routes\"\nfield = \"gaussian:w=1\"\ns = 0.5\nradii = [0.5]\n",
    );
    let cache = dir.path().join("cache");
    let mut csvs = Vec::new();
    for (k, jobs) in ["1", "2", "1"].iter().enumerate() {
        let out = dir.path().join(format!("out{k}"));
        let o = run(&["eval", "--config", cfg.to_str().unwrap(), "--jobs", jobs], &out);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let o = bin()
            .args(["scaling", "--config", routes.to_str().unwrap(), "--out"])
            .arg(&out)
            .env("NONLOCAL_ACF_CACHE_DIR", &cache)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        csvs.push((
            std::fs::read(out.join("oracles.csv")).unwrap(),
            std::fs::read(out.join("routes.csv")).unwrap(),
        ));
    }
    assert!(csvs.windows(2).all(|w| w[0] == w[1]));
    assert!(std::fs::read_dir(&cache).unwrap().count() > 0);

    let seeded = run(
        &["eval", "--config", cfg.to_str().unwrap(), "--seed", "4"],
        &dir.path().join("seeded"),
    );
    assert_eq!(seeded.status.code(), Some(0));
    assert_ne!(std::fs::read(dir.path().join("seeded/oracles.csv")).unwrap(), csvs[0].0);
}

#[test]
fn eval_prints_operator_values() {
    let o = bin()
        .args(["eval", "--field", "gaussian:w=1", "--s", "0.5", "--point", "0.3"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let numeric = v["frac_laplacian"]["value"].as_f64().unwrap();
    let oracle = v["frac_laplacian_oracle"].as_f64().unwrap();
    assert!((numeric - oracle).abs() < 1e-9 * oracle.abs());
}
