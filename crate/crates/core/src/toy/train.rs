use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::ScoreSet;

use super::data::{generate, generate_batch, stream_seed, SyntheticBatch};
use super::loss::angular_margin_loss;
use super::model::ToyParams;
use super::ToyConfig;

const MONITOR_SALT: u64 = 0x0bad_cafe_0000_0004;
const HELD_OUT_SALT: u64 = 0x6e1d_0ff0_0000_0005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
}

/// `entries[k]` is the loss after `k` updates, measured on a fixed monitor
/// batch with train-mode statistics, so runs with `lr = 0` log a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
    pub params: ToyParams,
}

impl TrainingLog {
    pub fn initial_loss(&self) -> f64 {
        self.entries[0].loss
    }

    pub fn final_loss(&self) -> f64 {
        self.entries.last().expect("log is never empty").loss
    }

    pub fn to_json_lines(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain struct") + "\n")
            .collect()
    }
}

fn monitor_loss(params: &ToyParams, monitor: &SyntheticBatch, config: &ToyConfig) -> Result<f64> {
    let mut probe = params.clone();
    let (emb, _) = probe.forward_train(&monitor.inputs)?;
    Ok(angular_margin_loss(&emb, &params.classifier, &monitor.labels, config.margin, config.scale_s)?.loss)
}

pub fn train(config: &ToyConfig) -> Result<TrainingLog> {
    config.validate()?;
    let mut params = ToyParams::init(config)?;
    let monitor = generate(config, config.batch, stream_seed(config.seed, MONITOR_SALT, 0));
    let mut entries = Vec::with_capacity(config.steps + 1);

    for step in 0..=config.steps {
        let loss = monitor_loss(&params, &monitor, config)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        entries.push(LogEntry { step, loss });
        if step == config.steps {
            break;
        }

        let batch = generate_batch(config, step as u64);
        let (emb, cache) = params.forward_train(&batch.inputs)?;
        let out = angular_margin_loss(&emb, &params.classifier, &batch.labels, config.margin, config.scale_s)?;
        if !out.loss.is_finite() {
            return Err(Error::Divergence { step, loss: out.loss });
        }
        let grads = params.backward(&out.d_embeddings, &cache)?;
        params.sgd_step(&grads, &out.d_class_weights, config);
    }
    Ok(TrainingLog { entries, params })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
}

/// Held-out samples and every unordered pair among them.
#[derive(Debug, Clone)]
pub struct HeldOut {
    pub batch: SyntheticBatch,
    pub pairs: Vec<VerificationPair>,
}

pub fn held_out_pairs(config: &ToyConfig, samples: usize) -> HeldOut {
    let batch = generate(config, samples, stream_seed(config.seed, HELD_OUT_SALT, 0));
    let pairs = (0..samples)
        .flat_map(|a| (a + 1..samples).map(move |b| VerificationPair { a, b }))
        .collect();
    HeldOut { batch, pairs }
}

/// Cosine similarity of each pair's inference-mode embeddings; label 1 iff
/// both samples share a class.
pub fn embed_pairs(params: &ToyParams, batch: &SyntheticBatch, pairs: &[VerificationPair]) -> Result<ScoreSet> {
    let emb = params.embed(&batch.inputs)?;
    let mut scores = ScoreSet::new();
    for p in pairs {
        let cos = cosine(emb.row(p.a), emb.row(p.b))?;
        scores.push(batch.labels[p.a] == batch.labels[p.b], cos);
    }
    Ok(scores)
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::contract("cannot score a zero-norm embedding"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
