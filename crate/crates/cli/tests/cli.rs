//! Smoke tests for the `markgate` binary: every subcommand runs against real
//! files produced through the library.

use std::collections::BTreeMap;
use std::process::Command;
use std::sync::Arc;

use markgate_core::gateway::{Gateway, GatewayOptions};
use markgate_core::hashcore::{canonicalize, Dtype, ModelKeySet, WatermarkRatio};
use markgate_core::mapping::MappingConfig;
use markgate_core::simattack::toy_linear_model;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_markgate"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn keygen_emits_hex_key() {
    let out = run_ok(bin().arg("keygen"));
    let key = out.trim();
    assert_eq!(key.len(), 64);
    assert!(key.chars().all(|c| c.is_ascii_hexdigit()));
}

#[test]
fn stats_min_size_matches_reference() {
    let out = run_ok(bin().args([
        "stats",
        "min-size",
        "--m",
        "10",
        "--e",
        "0.5",
        "--target",
        "2^-64/10^6",
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["min_size"], 109);
}

#[test]
fn stats_sweep_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curve.csv");
    run_ok(bin().args([
        "stats",
        "trivial-prob",
        "--m",
        "10",
        "--e",
        "0.5",
        "--size",
        "50",
        "--sweep-to",
        "60",
        "--csv",
        csv.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("size,log10_prob\n"));
    assert_eq!(text.lines().count(), 61);
}

#[test]
fn simulate_writes_report_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("scenario.json");
    std::fs::write(
        &scenario,
        serde_json::json!({
            "name": "smoke",
            "seed": 5,
            "n_queries": 400,
            "n_clients": 2,
            "r_w": "0.05",
            "e": "0.5",
            "retention": 1.0,
            "expected": "pass",
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let stdout = run_ok(bin().args([
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    assert!(stdout.contains("expectation met"));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["expectation_met"], true);
    assert!(out_dir.join("report.csv").exists());
}

/// Builds gateway state on disk and exercises `verify` and `contest` through
/// the binary with a local model file as the suspect.
#[test]
fn verify_and_contest_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let model = Arc::new(toy_linear_model(10, 16).unwrap());
    let model_path = dir.path().join("model.json");
    model.save(&model_path).unwrap();

    let keys = ModelKeySet::new([3; 32], WatermarkRatio::one(), MappingConfig::identity());
    let opts = GatewayOptions::rooted(dir.path());
    let board_path = dir.path().join("bulletin.jsonl");
    let gw = Gateway::new(model.clone(), keys, opts).unwrap();
    gw.register_model().unwrap();
    for i in 0..10u8 {
        let x = canonicalize(Dtype::U8, &[16], (0..16).map(|j| i * 16 + j).collect()).unwrap();
        gw.handle_predict("alice", &x).unwrap();
    }
    let receipt = gw.snapshot_register("alice").unwrap();

    // suspect = the victim's own gateway pipeline is not a file; instead use
    // a surrogate model file that memorizes the backdoored classes exactly
    let bundle = gw.store().bundle("alice", model.digest()).unwrap();
    let mut entries = BTreeMap::new();
    for rec in bundle.records() {
        let mut probs = vec![0.0f64; 10];
        probs[rec.b_class] = 1.0;
        entries.insert(markgate_core::digest::to_hex(&rec.input.digest()), probs);
    }
    let surrogate =
        markgate_core::model::LoadedModel::from_spec(&markgate_core::model::ModelSpec {
            model_id: "memorizing-surrogate".into(),
            m: 10,
            input_shape: vec![16],
            backend: markgate_core::model::Backend::Lookup { entries },
        })
        .unwrap();
    let surrogate_path = dir.path().join("surrogate.json");
    surrogate.save(&surrogate_path).unwrap();

    let report_path = dir.path().join("report.json");
    let stdout = run_ok(bin().args([
        "verify",
        "--bundle",
        receipt.bundle_path.to_str().unwrap(),
        "--board",
        board_path.to_str().unwrap(),
        "--model",
        model_path.to_str().unwrap(),
        "--suspect",
        surrogate_path.to_str().unwrap(),
        "--e",
        "0.5",
        "--out",
        report_path.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["l_value"], 0.0);
    assert!(report_path.exists());

    // contest with the surrogate itself as the "original": its vectors match
    // the suspect API (same file), but it was never committed to the board
    let out = bin()
        .args([
            "contest",
            "--bundle",
            receipt.bundle_path.to_str().unwrap(),
            "--board",
            board_path.to_str().unwrap(),
            "--model",
            model_path.to_str().unwrap(),
            "--suspect",
            surrogate_path.to_str().unwrap(),
            "--contester-model",
            surrogate_path.to_str().unwrap(),
            "--e",
            "0.5",
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["ruling"], "claimant_wins");
}

#[test]
fn serve_binds_and_answers() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_linear_model(10, 16).unwrap();
    let model_path = dir.path().join("model.json");
    model.save(&model_path).unwrap();
    std::fs::write(dir.path().join("key.hex"), "ab".repeat(32)).unwrap();

    // pick a free port up front
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let config = serde_json::json!({
        "model_file": model_path,
        "key_file": dir.path().join("key.hex"),
        "r_w": "0.01",
        "mapping": {"kind": "identity"},
        "response_mode": "full_vector",
        "api_keys": {"sk-test": "tester"},
        "listen": format!("127.0.0.1:{port}"),
        "trigger_dir": dir.path().join("triggers"),
        "bulletin_file": dir.path().join("bulletin.jsonl"),
    });
    let config_path = dir.path().join("gateway.json");
    std::fs::write(&config_path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();

    let mut child = bin()
        .args(["serve", "--config", config_path.to_str().unwrap()])
        .spawn()
        .unwrap();
    let client = reqwest::blocking::Client::new();
    let stats_url = format!("http://127.0.0.1:{port}/v1/admin/stats");
    let mut up = false;
    for _ in 0..50 {
        std::thread::sleep(std::time::Duration::from_millis(100));
        if let Ok(resp) = client.get(&stats_url).send() {
            if resp.status().is_success() {
                up = true;
                break;
            }
        }
    }
    if up {
        let body = serde_json::json!({
            "input_b64": base64_encode(&[7u8; 16]),
            "shape": [16],
            "dtype": "u8",
        });
        let r = client
            .post(format!("http://127.0.0.1:{port}/v1/predict"))
            .header("X-Api-Key", "sk-test")
            .json(&body)
            .send()
            .unwrap();
        assert_eq!(r.status(), 200);
    }
    child.kill().ok();
    child.wait().ok();
    assert!(up, "server never came up");
}

fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}
