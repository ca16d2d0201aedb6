use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mfdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfdg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    root.join(name).to_string_lossy().into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p: PathBuf = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn stdout_f64(out: &Output) -> f64 {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .next()
        .unwrap()
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn w2_of_identical_files_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(
        tmp.path(),
        "a.txt",
        "# dim=2 n=3\n0.1 0.2 0.25\n0.4,0.9,0.25\n0.7 0.5 0.5\n",
    );
    let out = mfdg(&["w2", &a, &a]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_f64(&out), 0.0);

    let bad = write(tmp.path(), "bad.txt", "# dim=1 n=2\n0.1 1\n0.2 1\n");
    assert_eq!(mfdg(&["w2", &bad, &bad]).status.code(), Some(2));
}

#[test]
fn w2_of_shifted_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(tmp.path(), "a.txt", "# dim=1 n=2\n0.0 0.5\n0.5 0.5\n");
    let b = write(tmp.path(), "b.txt", "# dim=1 n=2\n0.1 0.5\n0.4 0.5\n");
    let out = mfdg(&["w2", &a, &b]);
    assert_eq!(out.status.code(), Some(0));
    assert!((stdout_f64(&out) - 0.1).abs() < 1e-12);

    let c = write(tmp.path(), "c.txt", "# dim=1 n=1\n0.0 1\n");
    let d = write(tmp.path(), "d.txt", "# dim=1 n=2\n0.1 0.5\n0.2 0.5\n");
    let out = mfdg(&["w2", &c, &d]);
    // (0.1^2 + 0.2^2) / 2
    assert!((stdout_f64(&out) - 0.025f64.sqrt()).abs() < 1e-12);
}

#[test]
fn w2_rejects_mismatched_dimensions() {
    let tmp = tempfile::tempdir().unwrap();
    let a = write(tmp.path(), "a.txt", "# dim=1 n=1\n0.3 1\n");
    let b = write(tmp.path(), "b.txt", "# dim=2 n=1\n0.3 0.3 1\n");
    assert_eq!(mfdg(&["w2", &a, &b]).status.code(), Some(2));
}

#[test]
fn bad_arguments_exit_two() {
    assert_eq!(mfdg(&["iterate"]).status.code(), Some(2));
    assert_eq!(
        mfdg(&["simulate", "--scenario", "/nonexistent.toml"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(mfdg(&["--help"]).status.code(), Some(0));
}

#[test]
fn simulate_translates_the_cloud() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = mfdg(&[
        "simulate",
        "--scenario",
        &scenario("split_linear.toml"),
        "--out",
        out.to_str().unwrap(),
        "--u-atom",
        "2",
        "--v-atom",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let rows: Vec<Vec<&str>> = trace
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    let start: Vec<f64> = rows
        .iter()
        .filter(|r| r[0].parse::<f64>().unwrap() == 0.0 && r[1] != "summary")
        .map(|r| r[2].parse().unwrap())
        .collect();
    let end: Vec<f64> = rows
        .iter()
        .filter(|r| (r[0].parse::<f64>().unwrap() - 0.15).abs() < 1e-12 && r[1] != "summary")
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert_eq!(start.len(), 3);
    // velocity u + v = 1 over the horizon 0.15
    for (a, b) in start.iter().zip(&end) {
        assert!((b - a - 0.15).abs() < 1e-9);
    }
    let s = summary(&out);
    assert!(s["lipschitz"]["ok"].as_bool().unwrap());
}

#[test]
fn still_scenario_iterates_once() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("it");
    let o = out.to_str().unwrap();
    let sc = scenario("still.toml");
    assert_eq!(
        mfdg(&["iterate", "--scenario", &sc, "--out", o])
            .status
            .code(),
        Some(0)
    );
    let s = summary(&out);
    assert_eq!(s["root_gap"].as_f64(), Some(0.0));
    assert_eq!(s["k"].as_u64(), Some(1));
    // |0.2 - 0.5|^2
    assert!((s["lower_root"].as_f64().unwrap() - 0.09).abs() < 1e-12);

    assert_eq!(
        mfdg(&["iterate", "--scenario", &sc, "--out", o, "--resume"])
            .status
            .code(),
        Some(0)
    );
    assert_eq!(summary(&out)["sweeps"].as_u64(), Some(0));
}

#[test]
fn graph_cap_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mfdg(&[
        "iterate",
        "--scenario",
        &scenario("split_linear.toml"),
        "--out",
        tmp.path().to_str().unwrap(),
        "--cap",
        "10",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn verify_needs_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mfdg(&[
        "verify",
        "--scenario",
        &scenario("still.toml"),
        "--out",
        tmp.path().to_str().unwrap(),
        "--trials",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn understated_constants_still_run() {
    // halved Lipschitz constant: the bound may or may not hold, but the run completes
    let tmp = tempfile::tempdir().unwrap();
    let body = fs::read_to_string(scenario("barycenter.toml"))
        .unwrap()
        .replace("lipschitz = 1.0", "lipschitz = 0.5");
    assert!(body.contains("lipschitz = 0.5"));
    let sc = write(tmp.path(), "half.toml", &body);
    let out = tmp.path().join("r");
    let o = mfdg(&[
        "rollout",
        "--scenario",
        &sc,
        "--out",
        out.to_str().unwrap(),
        "--cells",
        "2",
        "--eps",
        "0.1",
    ]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)));
    assert!(out.join("summary.json").exists());
}
