use std::path::Path;
use std::process::{Command, Output};

fn step(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_step"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn step")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = step(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn plan_and_render_a_generated_world() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let meta: serde_json::Value = serde_json::from_str(&ok(d, &["gen-world", "--seed", "5", "--out", "w.json"])).unwrap();
    let xy = |k: &str| format!("{},{}", meta[k][0], meta[k][1]);

    ok(d, &["plan-geometric", "--map", "w.json", "--start", &xy("start"), "--goal", &xy("goal"), "--out", "p.json"]);
    let path = json(&d.join("p.json"));
    assert!(path["poses"].as_array().unwrap().len() > 2);

    let state = format!("{},0,0", xy("start"));
    ok(
        d,
        &["plan-mpc", "--map", "w.json", "--path", "p.json", "--state", &state, "--out", "t.json", "--dump-qp", "qp.json"],
    );
    let plan = json(&d.join("t.json"));
    assert_eq!(plan["trajectory"]["states"].as_array().unwrap().len(), 21);
    let qp = json(&d.join("qp.json"));
    assert!(qp["n"].as_u64().unwrap() > 0);

    ok(d, &["render", "--map", "w.json", "--path", "p.json", "--trajectory", "t.json", "--obstacles", "0.7", "--out", "m.ppm"]);
    let img = std::fs::read(d.join("m.ppm")).unwrap();
    assert!(img.starts_with(b"P6\n"));
}

#[test]
fn build_risk_adds_layers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-world", "--seed", "1", "--out", "w.json", "--truth", "truth.json"]);
    ok(d, &["--alpha", "0.9", "build-risk", "--map", "truth.json", "--out", "r.json"]);
    let layers = json(&d.join("r.json"))["layers"].as_object().unwrap().clone();
    assert!(layers.contains_key("cvar"));
}

#[test]
fn simulate_reproduces_the_batch_row() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/study.toml");
    let csv = ok(d, &["--config", cfg, "monte-carlo", "--runs", "1", "--alphas", "0.5", "--seed", "3", "--format", "csv"]);
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let seed = row[2];
    ok(d, &["--config", cfg, "--alpha", "0.5", "simulate", "--seed", seed, "--out", "ep.json"]);
    let ep = json(&d.join("ep.json"));
    assert_eq!(ep["steps"].as_u64().unwrap().to_string(), row[7]);
    assert_eq!(ep["path_length_m"].as_f64().unwrap(), row[4].parse::<f64>().unwrap());
}

#[test]
fn errors_exit_nonzero_with_a_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = step(d, &["build-risk", "--map", "missing.json", "--out", "x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let out = step(d, &["--alpha", "1.5", "gen-world", "--out", "w.json"]);
    assert!(!out.status.success());

    std::fs::write(d.join("bad.toml"), "[mpc]\nhorizon = 0\n").unwrap();
    let out = step(d, &["--config", "bad.toml", "gen-world", "--out", "w.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("horizon"));

    ok(d, &["gen-world", "--seed", "2", "--out", "w.json"]);
    let out = step(d, &["plan-geometric", "--map", "w.json", "--start", "1", "--goal", "2,2"]);
    assert!(!out.status.success());
}
