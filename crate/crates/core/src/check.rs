//! Invariant suite for the pooling block, run by `gnap check`.
//!
//! Every property is measured against an oracle written directly from the
//! definitions (norms recomputed with plain loops) rather than through the
//! layer's own helpers. The reweighting kernel is injectable so a
//! deliberately broken kernel can show that the suite catches it.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{fc_head_forward, gnap_forward, reweight, GnapState, Mode, DEFAULT_EPS_BN, DEFAULT_EPS_NORM};
use crate::tensor::{seeded_permutation, FeatureMap, Matrix, NormalStream, Shape4};

pub const NORM_TOLERANCE: f64 = 1e-9;
pub const PERMUTATION_TOLERANCE: f64 = 1e-12;
pub const SCALE_TOLERANCE: f64 = 1e-9;
pub const WITNESS_MIN_CHANGE: f64 = 1e-3;
pub const FIXED_POINT_TOLERANCE: f64 = 1e-12;
pub const SCALES: [f64; 4] = [1e-3, 0.5, 7.0, 1e3];

/// `eps_bn` used when checking that the whole block ignores input scale.
/// The default `eps_bn` is an additive floor on the variance and breaks the
/// invariance by roughly `eps_bn / (alpha^2 var)`.
pub const BLOCK_SCALE_EPS_BN: f64 = 1e-30;

pub const PROPERTIES: &[(&str, &str)] = &[
    ("norm-equalization", "every nonzero local norm of the reweighted map equals the sample's mean norm"),
    ("permutation-invariance", "the block's embedding ignores spatial permutations, train and inference"),
    ("scale-equivariance", "reweight(a x) = a reweight(x); the train-mode block ignores input scale"),
    ("fc-negative-control", "a flattening FC head does change under a spatial permutation"),
    ("uniform-fixed-point", "reweighting leaves a map with equal local norms unchanged"),
];

/// A deliberately broken reweighting kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mutation {
    /// Scales each position by `r / m` instead of `m / r`.
    InvertRatio,
}

pub type Kernel<'a> = &'a dyn Fn(&FeatureMap) -> Result<FeatureMap>;

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub seed: u64,
    pub fixtures: usize,
    pub permutations: usize,
    pub extra_inputs: Vec<FeatureMap>,
    pub mutation: Option<Mutation>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            seed: 0,
            fixtures: 100,
            permutations: 50,
            extra_inputs: Vec::new(),
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    /// Passes when `value <= threshold`.
    Max,
    /// Passes when `value > threshold`.
    Min,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropertyOutcome {
    pub property: &'static str,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub bound: Bound,
    pub cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl PropertyOutcome {
    fn new(property: &'static str, value: f64, threshold: f64, bound: Bound, cases: usize) -> Self {
        let passed = match bound {
            Bound::Max => value <= threshold,
            Bound::Min => value > threshold,
        };
        PropertyOutcome {
            property,
            passed: passed && value.is_finite(),
            value,
            threshold,
            bound,
            cases,
            note: None,
        }
    }
}

pub fn reference_kernel(x: &FeatureMap) -> Result<FeatureMap> {
    Ok(reweight(x, DEFAULT_EPS_NORM)?.0)
}

/// Per-position channel norms, `[n][p]`, by direct summation.
pub fn oracle_norms(x: &FeatureMap) -> Vec<Vec<f64>> {
    let s = x.shape();
    (0..s.n)
        .map(|n| {
            (0..s.h * s.w)
                .map(|p| {
                    let (i, j) = (p / s.w, p % s.w);
                    (0..s.c).map(|c| x.get(n, c, i, j).powi(2)).sum::<f64>().sqrt()
                })
                .collect()
        })
        .collect()
}

pub fn inverted_kernel(x: &FeatureMap) -> Result<FeatureMap> {
    let s = x.shape();
    let norms = oracle_norms(x);
    let mut out = x.clone();
    for (n, r) in norms.iter().enumerate() {
        let m = r.iter().sum::<f64>() / r.len() as f64;
        if m == 0.0 {
            continue;
        }
        for c in 0..s.c {
            for p in 0..s.spatial() {
                let (i, j) = (p / s.w, p % s.w);
                out.set(n, c, i, j, x.get(n, c, i, j) * r[p] / m);
            }
        }
    }
    Ok(out)
}

/// Seeded fixtures from (2,3,4,4) up to (4,64,7,7) with magnitudes spread
/// over four decades. Every fourth map is rectified, which gives some
/// positions an exactly zero norm.
pub fn fixture_maps(seed: u64, count: usize) -> Result<Vec<FeatureMap>> {
    const CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];
    let mut rng = NormalStream::new(seed ^ 0x5eed_f1c7_0000_0001);
    (0..count)
        .map(|k| {
            let shape = Shape4::new(2 + k % 3, CHANNELS[(k / 3) % 5], 4 + (k / 15) % 4, 4 + (k / 2) % 4);
            let std = 10f64.powf(rng.uniform_in(-2.0, 2.0));
            let x = FeatureMap::randn_seeded(shape, rng.below(usize::MAX) as u64, std)?;
            Ok(if k % 4 == 3 { x.map(|v| v.max(0.0)) } else { x })
        })
        .collect()
}

/// Largest relative deviation of a reweighted local norm from the mean norm,
/// over positions whose input norm is nonzero.
pub fn norm_equalization(maps: &[FeatureMap], kernel: Kernel) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in maps {
        let before = oracle_norms(x);
        let after = oracle_norms(&kernel(x)?);
        for (r_in, r_out) in before.iter().zip(&after) {
            let m = r_in.iter().sum::<f64>() / r_in.len() as f64;
            for (&a, &b) in r_in.iter().zip(r_out) {
                if a > 0.0 {
                    worst = worst.max((b - m).abs() / m);
                }
            }
        }
    }
    Ok(worst)
}

fn block_state(channels: usize, seed: u64, mode: Mode) -> GnapState {
    let mut rng = NormalStream::new(seed);
    let mut state = GnapState::new(channels).with_mode(mode);
    for bn in [&mut state.entry, &mut state.exit] {
        for c in 0..channels {
            bn.beta[c] = 0.5 * rng.next();
            bn.running_mean[c] = 0.1 * rng.next();
            bn.running_var[c] = rng.uniform_in(0.5, 2.0);
        }
    }
    state
}

fn embed(x: &FeatureMap, state: &GnapState) -> Result<Matrix> {
    Ok(gnap_forward(x, &mut state.clone())?.0)
}

/// Largest absolute embedding change over `count` random spatial
/// permutations per map, in both modes.
pub fn permutation_invariance(maps: &[FeatureMap], count: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, x) in maps.iter().enumerate() {
        let s = x.shape();
        for mode in [Mode::Train, Mode::Inference] {
            let state = block_state(s.c, seed.wrapping_add(k as u64), mode);
            let base = embed(x, &state)?;
            for t in 0..count {
                let perm = seeded_permutation(s.spatial(), seed ^ ((k * 1000 + t) as u64).wrapping_mul(0x9e37_79b9));
                let moved = embed(&x.permute_spatial(&perm)?, &state)?;
                worst = worst.max(base.max_abs_diff(&moved));
            }
        }
    }
    Ok(worst)
}

fn rel_diff(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(floor)
    }
}

/// Largest elementwise relative gap between `kernel(a x)` and `a kernel(x)`.
pub fn scale_equivariance(maps: &[FeatureMap], scales: &[f64], kernel: Kernel) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in maps {
        let base = kernel(x)?;
        for &alpha in scales {
            let scaled = kernel(&x.scale(alpha))?;
            for (&a, &b) in scaled.data().iter().zip(base.data()) {
                worst = worst.max(rel_diff(a, alpha * b, 0.0));
            }
        }
    }
    Ok(worst)
}

/// Largest change of the train-mode embedding when the input is scaled,
/// relative to `max(|e|, 1)` since embeddings are standardized.
pub fn block_scale_invariance(maps: &[FeatureMap], scales: &[f64], eps_bn: f64, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, x) in maps.iter().enumerate() {
        let mut state = block_state(x.shape().c, seed.wrapping_add(k as u64), Mode::Train);
        state.eps_bn = eps_bn;
        let base = embed(x, &state)?;
        for &alpha in scales {
            let scaled = embed(&x.scale(alpha), &state)?;
            for (&a, &b) in scaled.data().iter().zip(base.data()) {
                worst = worst.max(rel_diff(a, b, 1.0));
            }
        }
    }
    Ok(worst)
}

/// Replaces every local channel vector by its direction times a per-sample
/// radius, so all local norms in a sample agree.
pub fn uniform_norm_map(x: &FeatureMap, seed: u64) -> Result<FeatureMap> {
    let s = x.shape();
    let norms = oracle_norms(x);
    let mut rng = NormalStream::new(seed);
    let mut out = x.clone();
    for n in 0..s.n {
        let radius = 10f64.powf(rng.uniform_in(-1.0, 1.0));
        for p in 0..s.spatial() {
            let (i, j) = (p / s.w, p % s.w);
            let r = norms[n][p];
            for c in 0..s.c {
                let v = if r > 0.0 {
                    radius * x.get(n, c, i, j) / r
                } else {
                    // a zero vector would break uniformity; use a unit axis
                    if c == 0 { radius } else { 0.0 }
                };
                out.set(n, c, i, j, v);
            }
        }
    }
    Ok(out)
}

/// Largest elementwise relative change of a uniform-norm map.
pub fn uniform_fixed_point(maps: &[FeatureMap], kernel: Kernel, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (k, x) in maps.iter().enumerate() {
        let u = uniform_norm_map(x, seed.wrapping_add(k as u64))?;
        let out = kernel(&u)?;
        for (&a, &b) in out.data().iter().zip(u.data()) {
            worst = worst.max(rel_diff(a, b, 0.0));
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Witness {
    pub fc_change: f64,
    pub gnap_change: f64,
}

/// One permutation applied to one seeded map: the FC head must move and the
/// block must not.
pub fn fc_witness(seed: u64) -> Result<Witness> {
    let shape = Shape4::new(2, 3, 4, 4);
    let x = FeatureMap::randn_seeded(shape, seed, 1.0)?;
    let w = Matrix::randn_seeded(shape.sample_len(), 4, seed.wrapping_add(1), 1.0)?;
    let bias = vec![0.0; 4];
    let perm = seeded_permutation(shape.spatial(), seed.wrapping_add(2));
    let moved = x.permute_spatial(&perm)?;
    let fc_change = fc_head_forward(&x, &w, &bias)?
        .0
        .max_abs_diff(&fc_head_forward(&moved, &w, &bias)?.0);
    let state = block_state(shape.c, seed.wrapping_add(3), Mode::Train);
    let gnap_change = embed(&x, &state)?.max_abs_diff(&embed(&moved, &state)?);
    Ok(Witness { fc_change, gnap_change })
}

pub fn run(config: &CheckConfig) -> Result<Vec<PropertyOutcome>> {
    if config.fixtures == 0 && config.extra_inputs.is_empty() {
        return Err(Error::parameter("no fixtures to check"));
    }
    let mut maps = fixture_maps(config.seed, config.fixtures)?;
    maps.extend(config.extra_inputs.iter().cloned());
    let kernel: Kernel = match config.mutation {
        None => &reference_kernel,
        Some(Mutation::InvertRatio) => &inverted_kernel,
    };
    let cases = maps.len();

    let norm = norm_equalization(&maps, kernel)?;
    let perm = permutation_invariance(&maps, config.permutations, config.seed)?;
    let scale = scale_equivariance(&maps, &SCALES, kernel)?;
    let block = block_scale_invariance(&maps, &SCALES, BLOCK_SCALE_EPS_BN, config.seed)?;
    let block_default = block_scale_invariance(&maps, &SCALES, DEFAULT_EPS_BN, config.seed)?;
    let witness = fc_witness(config.seed)?;
    let fixed = uniform_fixed_point(&maps, kernel, config.seed)?;

    let mut scale_outcome = PropertyOutcome::new("scale-equivariance", scale.max(block), SCALE_TOLERANCE, Bound::Max, cases);
    scale_outcome.note = Some(format!(
        "reweight {scale:.3e}; block {block:.3e} at eps_bn {BLOCK_SCALE_EPS_BN:e}, {block_default:.3e} at eps_bn {DEFAULT_EPS_BN:e}"
    ));
    let mut witness_outcome =
        PropertyOutcome::new("fc-negative-control", witness.fc_change, WITNESS_MIN_CHANGE, Bound::Min, 1);
    witness_outcome.passed &= witness.gnap_change <= PERMUTATION_TOLERANCE;
    witness_outcome.note = Some(format!("gnap change {:.3e}", witness.gnap_change));

    Ok(vec![
        PropertyOutcome::new("norm-equalization", norm, NORM_TOLERANCE, Bound::Max, cases),
        PropertyOutcome::new(
            "permutation-invariance",
            perm,
            PERMUTATION_TOLERANCE,
            Bound::Max,
            cases * config.permutations * 2,
        ),
        scale_outcome,
        witness_outcome,
        PropertyOutcome::new("uniform-fixed-point", fixed, FIXED_POINT_TOLERANCE, Bound::Max, cases),
    ])
}
