use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

fn mswl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mswl"));
    cmd.env("MSWL_LOG", "warn");
    cmd
}

fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut config = serde_json::json!({
        "cohort": {
            "site_sizes": [30, 40, 36],
            "patient_fractions": [0.5, 0.5, 0.5],
            "n_features": 30,
            "planted_support": 5,
            "effect_size": 1.0,
            "seed": 11
        },
        "grid": { "c_values": [0.5, 8.0], "gamma_values": [0.01, 0.1] },
        "sparsity_fraction": 0.2,
        "path_len": 40,
        "barrier_timeout_secs": 60,
        "out_dir": dir.join("out")
    });
    for (k, v) in extra.as_object().unwrap() {
        config[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, config.to_string()).unwrap();
    path
}

#[test]
fn simulate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({}));
    let out = mswl().args(["simulate", "--config"]).arg(&config).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["improvement"].as_array().unwrap().len(), 3);
    for name in ["transcript.jsonl", "metrics_per_round.csv", "feature_persistence.csv"] {
        assert!(dir.path().join("out").join(name).is_file());
    }
}

#[test]
fn server_and_sites_match_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let config = write_config(
        dir.path(),
        serde_json::json!({ "endpoint": format!("127.0.0.1:{port}"), "expected_sites": 3 }),
    );

    let data = dir.path().join("data");
    let out = mswl().args(["synth", "--config"]).arg(&config).arg("--out").arg(&data).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<PathBuf> = String::from_utf8(out.stdout).unwrap().lines().map(PathBuf::from).collect();
    assert_eq!(files.len(), 3);

    let server = mswl()
        .args(["server", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("socket"))
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let sites: Vec<_> = files
        .iter()
        .map(|f| {
            mswl()
                .args(["site", "--config"])
                .arg(&config)
                .arg("--data")
                .arg(f)
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut site in sites {
        assert!(site.wait().unwrap().success());
    }
    assert!(server.wait_with_output().unwrap().status.success());

    let out = mswl().args(["simulate", "--config"]).arg(&config).output().unwrap();
    assert!(out.status.success());
    let socket = fs::read(dir.path().join("socket/transcript.jsonl")).unwrap();
    let simulated = fs::read(dir.path().join("out/transcript.jsonl")).unwrap();
    assert_eq!(socket, simulated);
}

#[test]
fn bad_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), serde_json::json!({ "sparsity_fraction": 1.5 }));
    let out = mswl().args(["simulate", "--config"]).arg(&config).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparsity_fraction"));

    let missing = mswl().args(["simulate", "--config", "/nonexistent/c.json"]).output().unwrap();
    assert!(!missing.status.success());
}
