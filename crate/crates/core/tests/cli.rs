use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn gnap(args: &[&str]) -> (i32, Value, String) {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_gnap")).args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let json: Value = serde_json::from_str(stdout.trim())
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {stdout}"));
    (out.status.code().unwrap(), json, String::from_utf8(out.stderr).unwrap())
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn check_passes_on_a_fresh_build() {
    let (code, json, stderr) = gnap(&["check", "--fixtures", "20", "--permutations", "5"]);
    assert_eq!(code, 0, "{stderr}");
    assert_eq!(json["passed"], true);
    assert_eq!(json["properties"].as_array().unwrap().len(), 5);
}

#[test]
fn check_list_names_properties_without_running() {
    let (code, json, _) = gnap(&["check", "--list"]);
    assert_eq!(code, 0);
    let names: Vec<&str> = json["properties"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        ["norm-equalization", "permutation-invariance", "scale-equivariance", "fc-negative-control", "uniform-fixed-point"]
    );
}

#[test]
fn inverted_ratio_mutation_fails_norm_equalization() {
    let (code, json, stderr) = gnap(&["check", "--fixtures", "10", "--permutations", "2", "--mutate", "invert-ratio"]);
    assert_eq!(code, 1);
    assert_eq!(json["failed"], serde_json::json!(["norm-equalization"]));
    assert!(stderr.contains("FAIL norm-equalization"));
}

#[test]
fn check_accepts_extra_tensor_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("x.json");
    let x = gnap::FeatureMap::randn_seeded((2, 4, 3, 3), 5, 2.0).unwrap();
    gnap::io::write_tensor_file(&good, &x).unwrap();
    let (code, json, _) = gnap(&["check", "--fixtures", "0", "--permutations", "3", "--input", path_str(&good)]);
    assert_eq!(code, 0);
    assert_eq!(json["properties"][0]["cases"], 1);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"shape":[2,2],"data":[1,2,3,4]}"#).unwrap();
    let (code, json, _) = gnap(&["check", "--input", path_str(&bad)]);
    assert_eq!(code, 2);
    assert!(json["error"].is_string());
}

#[test]
fn gradcheck_all_layers_pass() {
    let (code, json, stderr) = gnap(&["gradcheck", "--layer", "all", "--seed", "0"]);
    assert_eq!(code, 0, "{stderr}");
    assert!(json["worst_rel_error"].as_f64().unwrap() < 1e-5);
}

#[test]
fn gradcheck_tiny_tolerance_fails_with_coordinates() {
    let (code, json, _) = gnap(&["gradcheck", "--layer", "gap", "--tol", "1e-12"]);
    assert_eq!(code, 1);
    let failed: Vec<&Value> = json["reports"].as_array().unwrap().iter().filter(|r| r["passed"] == false).collect();
    assert!(!failed.is_empty());
    assert_eq!(failed[0]["worst_coordinate"].as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_unknown_layer_is_a_usage_error() {
    let (code, json, _) = gnap(&["gradcheck", "--layer", "nosuch"]);
    assert_eq!(code, 2);
    assert!(json["error"].as_str().unwrap().contains("nosuch"));
}

#[test]
fn bench_reports_identical_outputs_across_threads() {
    let (code, json, _) = gnap(&["bench", "--n", "2", "--c", "16", "--h", "3", "--w", "3", "--iters", "3", "--threads", "1,3"]);
    assert_eq!(code, 0);
    assert_eq!(json["outputs_identical"], true);
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    assert!(json["runs"][0]["gnap_over_gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn bench_zero_iters_is_a_usage_error() {
    assert_eq!(gnap(&["bench", "--iters", "0"]).0, 2);
    assert_eq!(gnap(&["bench", "--n", "0"]).0, 2);
}

#[test]
fn train_toy_zero_steps_logs_only_the_initial_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (code, json, _) = gnap(&["train-toy", "--steps", "0", "--samples", "20", "--out", path_str(dir.path())]);
    assert_eq!(code, 0);
    let log = fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["loss"], json["initial_loss"]);
    assert!(dir.path().join("gnap_state.json").exists());
    gnap::io::read_state_file(&dir.path().join("gnap_state.json")).unwrap();
}

#[test]
fn train_toy_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |d: &Path| {
        vec!["train-toy", "--head", "fc", "--fasterfc", "--steps", "15", "--samples", "30", "--out"]
            .into_iter()
            .map(String::from)
            .chain([d.to_str().unwrap().to_string()])
            .collect::<Vec<_>>()
    };
    for d in [a.path(), b.path()] {
        let args = args(d);
        let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(gnap(&refs).0, 0);
    }
    for name in ["train_log.jsonl", "scores.csv", "params.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn three_heads_give_comparable_reports() {
    let dir = tempfile::tempdir().unwrap();
    for head in ["gnap", "gap", "fc"] {
        let out = dir.path().join(head);
        let (code, json, _) = gnap(&["train-toy", "--head", head, "--steps", "10", "--samples", "30", "--out", path_str(&out)]);
        assert_eq!(code, 0);
        assert_eq!(json["head"], head);
        assert_eq!(json["metrics"]["genuine"].as_u64().unwrap() + json["metrics"]["impostor"].as_u64().unwrap(), 435);
        let targets: Vec<f64> = json["metrics"]["tpr_at_fpr"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| t["fpr_target"].as_f64().unwrap())
            .collect();
        assert_eq!(targets, [0.01, 0.001]);
    }
}

#[test]
fn train_toy_divergence_or_collapse_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, json, _) = gnap(&["train-toy", "--head", "fc", "--lr", "1e300", "--steps", "20", "--out", path_str(dir.path())]);
    assert_eq!(code, 1);
    assert!(json["error"].is_string());
}

fn scores_file(dir: &Path, body: &str) -> String {
    let p = dir.join("scores.csv");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn eval_separated_and_hand_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let f = scores_file(dir.path(), "label,score\n1,0.9\n1,0.8\n0,0.1\n0,0.2\n");
    let (code, json, _) = gnap(&["eval", "--scores", &f]);
    assert_eq!(code, 0);
    assert_eq!(json["accuracy"]["value"], 1.0);
    assert_eq!(json["eer"]["value"], 0.0);
    assert_eq!(json["tpr_at_fpr"][0]["fpr_target"], 0.001);
    assert_eq!(json["tpr_at_fpr"][0]["tpr"], 1.0);

    let f = scores_file(dir.path(), "label,score\n1,0.9\n1,0.8\n1,0.2\n0,0.7\n0,0.3\n0,0.1\n");
    let (code, json, stderr) = gnap(&["eval", "--scores", &f, "--fpr", "0.5", "--fpr", "1"]);
    assert_eq!(code, 0);
    assert_eq!(json["eer"]["value"].as_f64().unwrap(), 1.0 / 3.0);
    assert_eq!(json["accuracy"]["value"].as_f64().unwrap(), 5.0 / 6.0);
    assert_eq!(json["tpr_at_fpr"].as_array().unwrap().len(), 2);
    assert!(stderr.contains("EER: 33.33%"));
}

#[test]
fn eval_rejects_bad_files_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    for (body, line) in [
        ("label,score\n", 1),
        ("label,score\n1,0.5\n0,x\n", 3),
        ("label,score\n1,0.5\n1,0.4\n", 3),
        ("lbl,score\n1,0.5\n", 1),
    ] {
        let f = scores_file(dir.path(), body);
        let (code, json, _) = gnap(&["eval", "--scores", &f]);
        assert_eq!(code, 2, "{body:?}");
        assert_eq!(json["line"], line, "{body:?}");
    }
    let (code, json, _) = gnap(&["eval", "--scores", "/definitely/not/here.csv"]);
    assert_eq!(code, 2);
    assert!(json["error"].is_string());
}

#[test]
fn usage_errors_still_print_json() {
    let (code, json, _) = gnap(&["frobnicate"]);
    assert_eq!(code, 2);
    assert!(json["error"].is_string());
    let (code, _, _) = gnap(&["train-toy", "--head", "resnet"]);
    assert_eq!(code, 2);
}
