use std::path::Path;
use std::process::{Command, Output};

use channel_fsi::extension::lift_field_w;
use channel_fsi::ns_solver::mesh_for_problem;
use channel_fsi_cli::ScenarioConfig;

const BASE: &str = r#"{
  "channel": { "H": 1.0, "Lrect": 3.0 },
  "inflow": { "profile": "couette", "U": 1.0 },
  "body": { "shape": { "kind": "ellipse", "params": [0.4, 0.2] } },
  "solver": { "size": 0.3 },
  "experiment": { "kind": "mesh-dump" }
}"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("scenario.json");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_channel-fsi"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .output()
        .unwrap()
}

#[test]
fn zero_lambda_solve_passes_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(dir.path(), BASE, &["solve", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("h1_norm: 0.000000000000e0"));
    assert!(stdout.ends_with("status: PASS\n"));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let names: Vec<&str> = manifest.lines().filter_map(|l| l.split_once("  ").map(|p| p.1)).collect();
    assert_eq!(names, ["certificate.txt", "config.json", "field.csv"]);
    assert!(manifest.ends_with("status: PASS\n"));
    for line in manifest.lines().filter(|l| l.contains("  ")) {
        let (hash, name) = line.split_once("  ").unwrap();
        let bytes = std::fs::read(out.join(name)).unwrap();
        assert_eq!(hash, channel_fsi_cli::run::sha256_hex(&bytes));
    }
}

#[test]
fn mesh_dump_matches_the_library_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(dir.path(), BASE, &["mesh-dump", "--out", out.to_str().unwrap(), "--jobs", "1"]);
        assert!(o.status.success());
    }
    let read = |p: &Path, n: &str| std::fs::read(p.join(n)).unwrap();
    assert_eq!(read(&a, "manifest.txt"), read(&b, "manifest.txt"));
    let sc = ScenarioConfig::from_json(BASE).unwrap().build().unwrap();
    let mesh = mesh_for_problem(&sc.problem, &sc.options.mesh).unwrap();
    let mut lib = Vec::new();
    mesh.write_text(&mut lib).unwrap();
    assert_eq!(read(&a, "mesh.txt"), lib);
    let config = String::from_utf8(read(&a, "config.json")).unwrap();
    assert_eq!(ScenarioConfig::from_json(&config).unwrap(), sc.config);
}

#[test]
fn flags_override_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = run(
        dir.path(),
        BASE,
        &["field-dump", "--out", out.to_str().unwrap(), "--lambda", "2.5", "--h", "0.1", "--size", "0.25"],
    );
    assert!(o.status.success());
    let config = ScenarioConfig::from_path(&out.join("config.json")).unwrap();
    assert_eq!(config.experiment.lambda, 2.5);
    assert_eq!(config.body.h, 0.1);
    assert_eq!(config.solver.size, 0.25);
    let fields = std::fs::read_to_string(out.join("fields.csv")).unwrap();
    assert!(fields.starts_with("x1,x2,s1,s2,div_s,w1,w2,div_w\n"));
    // The first row is the bottom-left corner, where w vanishes.
    let sc = config.build().unwrap();
    let w = lift_field_w(&sc.problem.layout()).unwrap();
    let first: Vec<f64> = fields.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    use channel_fsi::extension::AnalyticField;
    assert_eq!(w.value(&nalgebra::Point2::new(first[0], first[1])).norm(), first[5].hypot(first[6]));
}

#[test]
fn bad_configs_exit_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &BASE.replace(r#""size": 0.3"#, r#""size": 0.3, "sise": 1"#), &["run"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.contains("line 5") && err.contains("sise"), "{err}");
    let o = run(dir.path(), &BASE.replace(r#""size": 0.3"#, r#""size": -0.3"#), &["run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8(o.stderr).unwrap().contains("solver.size"));
}

#[test]
fn failed_certificate_gives_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    // Two levels this coarse are far from the asymptotic regime.
    let config = BASE.replace(r#""kind": "mesh-dump""#, r#""kind": "mms", "sizes": [0.3, 0.25]"#);
    let o = run(dir.path(), &config, &["run", "--out", out.to_str().unwrap()]);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(manifest.lines().last(), Some("status: FAIL"));
    assert!(String::from_utf8(o.stdout).unwrap().contains("check velocity_h1_order: FAIL"));
    assert!(manifest.contains("mms.csv"));
}
