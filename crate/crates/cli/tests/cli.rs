use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn circat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn json_doc(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", stdout(o)))
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(name);
    let text = std::fs::read_to_string(&path).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(doc: &Value, schema_name: &str) {
    let v = schema(schema_name);
    let errors: Vec<String> = v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{schema_name}: {errors:#?}");
}

fn tmp() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn p(dir: &tempfile::TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

#[test]
fn verify_fft_reports_parseval_and_convolution() {
    let o = circat(&["verify", "--suite", "fft", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.starts_with("verify config: {"));
    assert!(out.contains("Parseval"));
    assert!(out.contains("convolution theorem"));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = circat(&["verify", "--suite", "nope"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn verify_json_is_deterministic_and_valid() {
    let a = circat(&["--json", "verify", "--suite", "all", "--seed", "11"]);
    let b = circat(&["--json", "verify", "--suite", "all", "--seed", "11"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let doc = json_doc(&a);
    assert_valid(&doc, "verify.output.schema.json");
    assert_eq!(doc["passed"], Value::Bool(true));
    for c in doc["result"]["checks"].as_array().unwrap() {
        assert!(c["tolerance"].is_number() && c["property"].is_string());
    }
}

#[test]
fn bench_writes_one_row_per_length() {
    let dir = tmp();
    let csv = p(&dir, "b.csv");
    let o = circat(&[
        "bench", "--mech", "cat", "--path", "fft", "--n-list", "256,512,1024", "--d", "64", "--heads", "4",
        "--reps", "3", "--out", csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let rows = circat::bench::read_csv(&csv).unwrap();
    assert_eq!(rows.len(), 3);
    // printed ratios are recomputable from the CSV medians
    let out = stdout(&o);
    for w in rows.windows(2) {
        let ratio = w[1].time_median_ns / w[0].time_median_ns;
        assert!(out.contains(&format!("ratio T({})/T({}) = {ratio}", w[1].n, w[0].n)), "{out}");
    }
}

#[test]
fn bench_rejects_incompatible_combination() {
    let o = circat(&["bench", "--mech", "attention", "--path", "fft", "--n-list", "64"]);
    assert_eq!(code(&o), 2);
    let o = circat(&["bench", "--mech", "cat", "--heads", "3", "--d", "64", "--n-list", "64"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bench_json_validates() {
    let o = circat(&["--json", "bench", "--n-list", "32,64", "--reps", "3", "--mech", "vonly", "--path", "gather"]);
    assert_eq!(code(&o), 0);
    let doc = json_doc(&o);
    assert_valid(&doc, "bench.output.schema.json");
    assert_eq!(doc["result"]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn cost_model_defaults_and_boundary() {
    let o = circat(&["--json", "cost-model"]);
    assert_eq!(code(&o), 0);
    let doc = json_doc(&o);
    assert_valid(&doc, "cost-model.output.schema.json");
    assert!((doc["result"]["ratio"].as_f64().unwrap() - 1.477).abs() < 5e-4);

    // 2DK = H with D = 1024, H = 16
    let o = circat(&["cost-model", "--gqa-k", "0.0078125"]);
    let out = stdout(&o);
    assert!(out.contains("ratio GQA/CAT = 1\n"), "{out}");
    assert!(out.contains("boundary"));

    let ratio_at = |n: &str| {
        let o = circat(&["--json", "cost-model", "--n", n]);
        json_doc(&o)["result"]["ratio"].clone()
    };
    assert_eq!(ratio_at("16"), ratio_at("65536"));
}

#[test]
fn cost_model_rejects_non_positive() {
    assert_eq!(code(&circat(&["cost-model", "--d", "0"])), 2);
    assert_eq!(code(&circat(&["cost-model", "--heads", "x"])), 2);
}

#[test]
fn untrained_checkpoint_loss_is_near_ln_vocab() {
    let dir = tmp();
    let ck = p(&dir, "ck.bin");
    let o = circat(&["--json", "train-toy", "--steps", "0", "--checkpoint-out", ck.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let doc = json_doc(&o);
    assert_valid(&doc, "train-toy.output.schema.json");
    let loss = doc["result"]["final_eval_loss"].as_f64().unwrap();
    let ln_v = (16f64).ln();
    assert!((loss - ln_v).abs() < 0.1 * ln_v, "{loss}");
    assert!(ck.exists());
    assert!(circat::model::load_checkpoint(&ck).is_ok());
}

#[test]
fn training_is_deterministic_and_flags_beat_file() {
    let dir = tmp();
    let cfg = p(&dir, "c.json");
    std::fs::write(&cfg, r#"{"train-toy": {"steps": 4, "d": 16, "heads": 2, "n": 8, "log_every": 2}}"#).unwrap();
    let run = || {
        circat(&["--config", cfg.to_str().unwrap(), "train-toy", "--steps", "6", "--mixer", "cat-alter"])
    };
    let (a, b) = (run(), run());
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let out = stdout(&a);
    let first = out.lines().next().unwrap();
    assert!(first.contains(r#""steps":6"#) && first.contains(r#""d":16"#) && first.contains("cat_alter"), "{first}");
    assert_eq!(out.lines().filter(|l| l.starts_with("step ")).count(), 3);
}

#[test]
fn config_errors_are_usage_errors() {
    let dir = tmp();
    let cfg = p(&dir, "c.json");
    std::fs::write(&cfg, r#"{"steps": 1, "unknown": true}"#).unwrap();
    assert_eq!(code(&circat(&["--config", cfg.to_str().unwrap(), "train-toy"])), 2);
    std::fs::write(&cfg, "not json").unwrap();
    assert_eq!(code(&circat(&["--config", cfg.to_str().unwrap(), "cost-model"])), 2);
    assert_eq!(code(&circat(&["--config", "/nonexistent/c.json", "cost-model"])), 2);
    assert_eq!(code(&circat(&["train-toy", "--d", "30", "--heads", "4"])), 2);
}

#[test]
fn config_file_validates_against_schema() {
    let v = schema("config.schema.json");
    let good: Value = serde_json::json!({"bench": {"mech": "gqa:2", "n_list": [64, 128]}, "cost-model": {"gqa_k": 0.5}});
    assert!(v.is_valid(&good));
    assert!(v.is_valid(&serde_json::json!({"steps": 10, "mixer": "cat"})));
    assert!(!v.is_valid(&serde_json::json!({"bench": {"mech": "bogus"}})));
}

#[test]
fn export_maps_from_trained_checkpoint() {
    let dir = tmp();
    let ck = p(&dir, "ck.bin");
    let o = circat(&[
        "train-toy", "--steps", "3", "--n", "12", "--d", "16", "--heads", "2", "--mixer", "cat-alter", "--layers", "3",
        "--checkpoint-out", ck.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let maps_dir = p(&dir, "maps");
    let o = circat(&["--json", "export-maps", "--checkpoint", ck.to_str().unwrap(), "--out", maps_dir.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = json_doc(&o);
    assert_valid(&doc, "export-maps.output.schema.json");
    let layers = doc["result"]["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for l in layers {
        let is_attention = l["mechanism"] == "attention";
        assert_eq!(l["circulant"], Value::Bool(!is_attention), "{l}");
    }
    let mos = circat::maps::Gray::decode_pgm(&std::fs::read(maps_dir.join("mosaic.pgm")).unwrap()).unwrap();
    assert_eq!((mos.width, mos.height), (2 * 12, 3 * 12));
    let raw = circat::serialize::read_container(&maps_dir.join("maps.bin")).unwrap();
    assert_eq!(raw.len(), 6);

    // explicit tokens of the wrong length, and a cap below N
    let o = circat(&["export-maps", "--checkpoint", ck.to_str().unwrap(), "--out", maps_dir.to_str().unwrap(), "--tokens", "1,2"]);
    assert_eq!(code(&o), 2);
    let o = circat(&["export-maps", "--checkpoint", ck.to_str().unwrap(), "--out", maps_dir.to_str().unwrap(), "--max-n", "8"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&circat(&["export-maps"])), 2);
}
