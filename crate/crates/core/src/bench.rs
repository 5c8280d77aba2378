//! Wall-clock timing of the pooling kernels, used by `gnap bench`.
//!
//! Each kernel runs `iters` times per thread count; the median iteration is
//! reported. Outputs of every run are compared against the first thread
//! count, element by element.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::layers::{gap_forward, gnap_forward, gnap_infer, reweight, GnapState, Mode, DEFAULT_EPS_NORM};
use crate::tensor::{FeatureMap, Shape4};

pub const DEFAULT_SHAPE: Shape4 = Shape4::new(8, 512, 7, 7);

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub shape: Shape4,
    pub iters: usize,
    /// Thread counts to sweep; the first one is the reference for output
    /// comparison and for the headline ratio.
    pub threads: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            shape: DEFAULT_SHAPE,
            iters: 50,
            // at least two workers so the determinism check runs a real pool
            threads: vec![1, exec::available_threads().max(2)],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelTiming {
    pub kernel: &'static str,
    pub median_ns: u128,
    pub elements_per_sec: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThreadRun {
    pub threads: usize,
    pub timings: Vec<KernelTiming>,
    /// Median `gnap_infer` time over median GAP time.
    pub gnap_over_gap: f64,
    /// Same ratio for the train-mode forward pass, which also builds the
    /// backward cache.
    pub gnap_train_over_gap: f64,
    /// Largest absolute difference from the reference thread count.
    pub max_output_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub shape: [usize; 4],
    pub iters: usize,
    pub parallel_feature: bool,
    pub runs: Vec<ThreadRun>,
    pub outputs_identical: bool,
}

impl BenchReport {
    /// Ratio from the first (reference) thread count.
    pub fn gnap_over_gap(&self) -> f64 {
        self.runs[0].gnap_over_gap
    }
}

struct Outputs {
    reweighted: Vec<f64>,
    infer: Vec<f64>,
    train: Vec<f64>,
    gap: Vec<f64>,
}

impl Outputs {
    fn max_abs_diff(&self, other: &Outputs) -> f64 {
        let pairs = [
            (&self.reweighted, &other.reweighted),
            (&self.infer, &other.infer),
            (&self.train, &other.train),
            (&self.gap, &other.gap),
        ];
        pairs
            .iter()
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

fn median(mut samples: Vec<Duration>) -> Duration {
    samples.sort_unstable();
    samples[samples.len() / 2]
}

fn run_once(x: &FeatureMap, state: &GnapState, iters: usize) -> Result<(Vec<KernelTiming>, Outputs)> {
    let mut times: [Vec<Duration>; 4] = Default::default();
    // interleave kernels so slow drift in clock speed hits all of them
    for _ in 0..iters {
        let t = Instant::now();
        black_box(gap_forward(black_box(x)));
        times[0].push(t.elapsed());

        let t = Instant::now();
        black_box(gnap_infer(black_box(x), state)?);
        times[1].push(t.elapsed());

        let mut train_state = state.clone();
        let t = Instant::now();
        black_box(gnap_forward(black_box(x), &mut train_state)?);
        times[2].push(t.elapsed());

        let t = Instant::now();
        black_box(reweight(black_box(x), DEFAULT_EPS_NORM)?);
        times[3].push(t.elapsed());
    }
    let names = ["gap", "gnap_infer", "gnap_forward_train", "reweight"];
    let elements = x.len() as f64;
    let timings = names
        .iter()
        .zip(times)
        .map(|(&kernel, samples)| {
            let m = median(samples);
            KernelTiming {
                kernel,
                median_ns: m.as_nanos(),
                elements_per_sec: elements / m.as_secs_f64().max(1e-12),
            }
        })
        .collect();
    let outputs = Outputs {
        reweighted: reweight(x, DEFAULT_EPS_NORM)?.0.into_vec(),
        infer: gnap_infer(x, state)?.into_vec(),
        train: gnap_forward(x, &mut state.clone())?.0.into_vec(),
        gap: gap_forward(x).into_vec(),
    };
    Ok((timings, outputs))
}

fn ratio(timings: &[KernelTiming], num: &str, den: &str) -> f64 {
    let get = |k: &str| timings.iter().find(|t| t.kernel == k).map_or(f64::NAN, |t| t.median_ns as f64);
    get(num) / get(den).max(1.0)
}

pub fn run(config: &BenchConfig) -> Result<BenchReport> {
    if config.iters == 0 {
        return Err(Error::parameter("--iters must be at least 1"));
    }
    if config.threads.is_empty() || config.threads.contains(&0) {
        return Err(Error::parameter("thread counts must be positive"));
    }
    let x = FeatureMap::randn_seeded(config.shape, config.seed, 1.0)?.map(|v| v.max(0.0));
    // running statistics from one train-mode pass so inference is realistic
    let mut state = GnapState::new(config.shape.c).with_mode(Mode::Train);
    gnap_forward(&x, &mut state)?;
    state.mode = Mode::Inference;

    let mut runs = Vec::new();
    let mut reference: Option<Outputs> = None;
    for &threads in &config.threads {
        let (timings, outputs) = exec::with_threads(threads, || run_once(&x, &state, config.iters))?;
        let max_output_diff = reference.as_ref().map_or(0.0, |r| r.max_abs_diff(&outputs));
        if reference.is_none() {
            reference = Some(outputs);
        }
        runs.push(ThreadRun {
            threads,
            gnap_over_gap: ratio(&timings, "gnap_infer", "gap"),
            gnap_train_over_gap: ratio(&timings, "gnap_forward_train", "gap"),
            timings,
            max_output_diff,
        });
    }
    let outputs_identical = runs.iter().all(|r| r.max_output_diff == 0.0);
    Ok(BenchReport {
        shape: config.shape.as_array(),
        iters: config.iters,
        parallel_feature: cfg!(feature = "parallel"),
        runs,
        outputs_identical,
    })
}
