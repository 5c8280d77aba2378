//! Regression lock on the block's numbers for a fixed input.
//!
//! The input values are stored in the file, so the check does not depend on
//! the platform's `ln`/`sin`/`cos` used by the seeded generator.
//! Regenerate with `cargo test --test golden -- --ignored`.

use std::path::PathBuf;

use gnap::layers::{gnap_forward, gnap_infer, GnapState, Mode};
use gnap::{FeatureMap, Matrix};
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct Golden {
    input: FeatureMap,
    beta_in: Vec<f64>,
    beta_out: Vec<f64>,
    train_embedding: Vec<f64>,
    running_mean_in: Vec<f64>,
    running_var_in: Vec<f64>,
    running_mean_out: Vec<f64>,
    running_var_out: Vec<f64>,
    inference_embedding: Vec<f64>,
}

fn path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/gnap_golden.json")
}

fn compute(input: FeatureMap, beta_in: Vec<f64>, beta_out: Vec<f64>) -> Golden {
    let mut state = GnapState::new(3).with_mode(Mode::Train);
    state.entry.beta = beta_in.clone();
    state.exit.beta = beta_out.clone();
    let (train, _) = gnap_forward(&input, &mut state).unwrap();
    let infer: Matrix = gnap_infer(&input, &state).unwrap();
    Golden {
        train_embedding: train.into_vec(),
        running_mean_in: state.entry.running_mean.clone(),
        running_var_in: state.entry.running_var.clone(),
        running_mean_out: state.exit.running_mean.clone(),
        running_var_out: state.exit.running_var.clone(),
        inference_embedding: infer.into_vec(),
        input,
        beta_in,
        beta_out,
    }
}

fn close(name: &str, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "{name}");
    for (k, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{name}[{k}]: {g} vs {w}");
    }
}

#[test]
fn block_reproduces_the_golden_file() {
    let golden: Golden = serde_json::from_str(&std::fs::read_to_string(path()).unwrap()).unwrap();
    let now = compute(golden.input.clone(), golden.beta_in.clone(), golden.beta_out.clone());
    close("train_embedding", &now.train_embedding, &golden.train_embedding);
    close("running_mean_in", &now.running_mean_in, &golden.running_mean_in);
    close("running_var_in", &now.running_var_in, &golden.running_var_in);
    close("running_mean_out", &now.running_mean_out, &golden.running_mean_out);
    close("running_var_out", &now.running_var_out, &golden.running_var_out);
    close("inference_embedding", &now.inference_embedding, &golden.inference_embedding);
}

#[test]
#[ignore]
fn regenerate_golden_file() {
    let input = FeatureMap::randn_seeded((2, 3, 4, 4), 42, 1.0).unwrap();
    let golden = compute(input, vec![0.1, -0.2, 0.3], vec![-0.05, 0.0, 0.25]);
    std::fs::write(path(), serde_json::to_string_pretty(&golden).unwrap() + "\n").unwrap();
}
