use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedfair_core::cli::Manifest;
use fedfair_core::gnn::GnnModel;

fn fedfair(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedfair"))
        .current_dir(cwd)
        .args(args)
        .output()
        .unwrap()
}

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
        .display()
        .to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let o = fedfair(d.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(fedfair(d.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fedfair(d.path(), &["simulate", "--rounds", "many"]).status.code(), Some(1));
    assert_eq!(fedfair(d.path(), &["simulate", "--config", "missing.json"]).status.code(), Some(1));

    fs::write(d.path().join("typo.json"), r#"{"federated": {"privacy": {"epsilonn": 1}}}"#).unwrap();
    let o = fedfair(d.path(), &["simulate", "--config", "typo.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epsilonn"));
    assert_eq!(fedfair(d.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.csv"), "from,to,distance_miles\n1,2,-3\n").unwrap();
    let o = fedfair(d.path(), &["ingest", "--topology", "bad.csv"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    fs::write(d.path().join("ours.json"), r#"{"name": "ours"}"#).unwrap();
    let o = fedfair(d.path(), &["report", "--ours", "ours.json", "--output", "r"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incomplete"));
}

#[test]
fn ingest_reports_fixture_density() {
    let d = tempfile::tempdir().unwrap();
    let o = fedfair(
        d.path(),
        &[
            "ingest",
            "--topology",
            &fixture("metr_la_topology.csv"),
            "--regions",
            &fixture("metr_la_regions.csv"),
            "--sensors",
            &fixture("metr_la_sensors.csv"),
            "--output",
            "net",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("density 0.1717"), "{text}");
    assert!(text.contains("nodes 207"));
    assert!(text.contains("regions 6"));
    assert!(d.path().join("net/manifest.json").is_file());
    assert!(d.path().join("net/network.json").is_file());
}

#[test]
fn manifest_reproduces_simulation() {
    let d = tempfile::tempdir().unwrap();
    let o = fedfair(d.path(), &["simulate", "--seed", "3", "--rounds", "2", "--lambda", "0.7", "--emit-csv", "--output", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: Manifest = serde_json::from_slice(&fs::read(d.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "simulate");
    assert_eq!(manifest.seed, 3);
    assert_eq!(manifest.config.routing.weights.lambda, 0.7);
    for f in &manifest.outputs {
        assert!(d.path().join("a").join(f).is_file(), "{f}");
    }

    // Re-run into a second directory from the manifest alone.
    fs::create_dir(d.path().join("again")).unwrap();
    let m = d.path().join("a/manifest.json").display().to_string();
    let o = fedfair(&d.path().join("again"), &["simulate", "--config", &m, "--output", "a"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(files(&d.path().join("a")), files(&d.path().join("again/a")));

    let rounds = fs::read_to_string(d.path().join("a/rounds.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(rounds.lines().next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["round", "mean_loss", "travel_time_min", "gini", "jain", "epsilon_spent", "uplink_bytes", "downlink_bytes"] {
        assert!(keys.contains(&k), "{k}");
    }
    let header = fs::read_to_string(d.path().join("a/assignments.csv")).unwrap();
    assert!(header.starts_with("vehicle_id,route_edges,travel_time_min,gini_delta,demo_impact,emissions_g\n"));
}

#[test]
fn train_checkpoint_feeds_simulate_and_route() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("c.json"),
        r#"{"model": {"hidden": 8}, "train": {"corpus_steps": 6}, "federated": {"rounds": 2, "num_clients": 3}}"#,
    )
    .unwrap();
    let o = fedfair(d.path(), &["train", "--config", "c.json", "--output", "t"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("round")).count(), 2);
    let ckpt: PathBuf = d.path().join("t/model.json");
    let model: GnnModel = serde_json::from_slice(&fs::read(&ckpt).unwrap()).unwrap();
    assert_eq!(model.config.hidden, 8);
    let privacy = fs::read_to_string(d.path().join("t/privacy.jsonl")).unwrap();
    assert!(privacy.lines().next().unwrap().contains("\"sigma\""));

    fs::write(d.path().join("req.csv"), "vehicle_id,origin,destination\n1,0,19\n2,19,0\n").unwrap();
    let o = fedfair(
        d.path(),
        &["route", "--config", "c.json", "--model", "t/model.json", "--requests", "req.csv", "--output", "r"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("assigned 2 unreachable 0"), "{}", stdout(&o));
    let rows = fs::read_to_string(d.path().join("r/assignments.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);


    fs::write(d.path().join("loop.csv"), "vehicle_id,origin,destination\n3,4,4\n").unwrap();
    let o = fedfair(d.path(), &["route", "--config", "c.json", "--requests", "loop.csv", "--output", "r"]);
    assert_eq!(o.status.code(), Some(2));

    let o = fedfair(d.path(), &["simulate", "--config", "c.json", "--model-free"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn report_compares_against_baselines() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("ours.json"),
        r#"{"name": "ours", "mean_travel_time_min": 14.2, "final_gini": 0.22, "mb_per_round": 28.2}"#,
    )
    .unwrap();
    fs::write(
        d.path().join("base.json"),
        r#"[{"name": "centralized", "mean_travel_time_min": 15.2, "final_gini": 0.45, "mb_per_round": 256.7}]"#,
    )
    .unwrap();
    let o = fedfair(d.path(), &["report", "--ours", "ours.json", "--baselines", "base.json", "--output", "cmp"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table: serde_json::Value = serde_json::from_slice(&fs::read(d.path().join("cmp/comparison.json")).unwrap()).unwrap();
    let row = &table["rows"][0];
    assert!((row["bytes_reduction_pct"].as_f64().unwrap() - 89.0).abs() < 0.1);
    assert!((row["travel_time_delta_pct"].as_f64().unwrap() + 6.6).abs() < 0.05);
    assert!(stdout(&o).contains("centralized"));
}
