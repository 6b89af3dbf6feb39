use channel_fsi_cli::{ConfigError, ExperimentKind, ScenarioConfig};

const MINIMAL: &str = r#"{
  "channel": { "H": 1.0, "Lrect": 3.0 },
  "inflow": { "profile": "couette", "U": 1.0 },
  "body": { "shape": { "kind": "ellipse", "params": [0.4, 0.2] } },
  "experiment": { "kind": "solve" }
}"#;

#[test]
fn minimal_config_uses_defaults() {
    let c = ScenarioConfig::from_json(MINIMAL).unwrap();
    assert_eq!(c.experiment.kind, ExperimentKind::Solve);
    assert_eq!(c.experiment.lambda, 0.0);
    assert_eq!(c.solver.size, 0.15);
    assert_eq!(c.force.k_b, 0.1);
    assert_eq!(c.output.directory, "out");
    let sc = c.build().unwrap();
    assert_eq!(sc.problem.lambda, 0.0);
    assert_eq!(sc.options.mesh.size, 0.15);
}

#[test]
fn round_trip_through_json() {
    let c = ScenarioConfig::from_json(MINIMAL).unwrap();
    let again = ScenarioConfig::from_json(&c.to_json()).unwrap();
    assert_eq!(c, again);
}

#[test]
fn unknown_keys_are_rejected_with_position() {
    let text = MINIMAL.replace(r#""U": 1.0"#, r#""U": 1.0, "wind": 3"#);
    match ScenarioConfig::from_json(&text) {
        Err(ConfigError::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("wind"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    let top = MINIMAL.replacen('{', r#"{ "extra": 1,"#, 1);
    assert!(matches!(ScenarioConfig::from_json(&top), Err(ConfigError::Parse { line: 1, .. })));
}

#[test]
fn invalid_values_name_their_key() {
    let cases = [
        (r#""H": 1.0"#, r#""H": -1.0"#, "channel.H"),
        (r#""params": [0.4, 0.2]"#, r#""params": [0.4]"#, "body.shape.params"),
        (r#""kind": "solve""#, r#""kind": "solve", "lambda": -2"#, "experiment.lambda"),
        (r#""kind": "solve""#, r#""kind": "solve", "lambda_grid": [0.0, 0.5, 0.2]"#, "experiment.lambda_grid"),
        (r#""profile": "couette", "U": 1.0"#, r#""profile": "couette", "U": 0.5"#, "inflow"),
        (r#""profile": "couette", "U": 1.0"#, r#""profile": "custom-polynomial", "U": 0.0"#, "inflow.v_in"),
    ];
    for (from, to, key) in cases {
        let text = MINIMAL.replace(from, to);
        match ScenarioConfig::from_json(&text).unwrap().build() {
            Err(ConfigError::Invalid { key: k, .. }) => assert_eq!(k, key, "{to}"),
            other => panic!("{to}: {other:?}"),
        }
    }
}

#[test]
fn experiment_names_match_serde() {
    for k in ExperimentKind::ALL {
        let text = MINIMAL.replace(r#""kind": "solve""#, &format!(r#""kind": "{}""#, k.name()));
        assert_eq!(ScenarioConfig::from_json(&text).unwrap().experiment.kind, k);
    }
}

#[test]
fn scenario_files_in_the_repository_build() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ScenarioConfig::from_path(&path)
                .unwrap()
                .build()
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
