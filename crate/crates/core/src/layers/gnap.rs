//! The norm-aware pooling block:
//! per-channel BN (gamma fixed) -> norm-aware reweighting -> GAP -> per-feature BN (gamma fixed).
//!
//! Each stage treats every spatial position identically, so the pooled
//! embedding does not depend on where in the grid a local feature sits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{FeatureMap, Matrix, Shape4};

use super::batch_norm::{
    bn_channel_backward, bn_channel_forward, bn_feature_backward, bn_feature_forward, BnCache,
    BnSettings, FixedGammaBn, Mode, DEFAULT_EPS_BN, DEFAULT_MOMENTUM,
};
use super::gap::{gap_backward, gap_forward};
use super::reweight::{reweight_owned, reweight_backward, NormCache, DEFAULT_EPS_NORM};
use super::{GradBundle, ParamGrad};

/// Parameters and running statistics of one block. The BN scale is the
/// constant 1 and has no storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StateJson", into = "StateJson")]
pub struct GnapState {
    pub entry: FixedGammaBn,
    pub exit: FixedGammaBn,
    pub eps_bn: f64,
    pub eps_norm: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl GnapState {
    /// Zero shifts, identity running statistics, inference mode.
    pub fn new(channels: usize) -> Self {
        GnapState {
            entry: FixedGammaBn::new(channels),
            exit: FixedGammaBn::new(channels),
            eps_bn: DEFAULT_EPS_BN,
            eps_norm: DEFAULT_EPS_NORM,
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Inference,
        }
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn channels(&self) -> usize {
        self.entry.channels()
    }

    fn settings(&self) -> BnSettings {
        BnSettings {
            eps: self.eps_bn,
            momentum: self.momentum,
            mode: self.mode,
        }
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        let lens = [
            self.entry.running_mean.len(),
            self.entry.running_var.len(),
            self.exit.beta.len(),
            self.exit.running_mean.len(),
            self.exit.running_var.len(),
        ];
        if c == 0 || lens.iter().any(|&l| l != c) {
            return Err(Error::contract("state vectors must all have length c"));
        }
        if !(self.eps_bn > 0.0) || !(self.eps_norm > 0.0) {
            return Err(Error::parameter("eps_bn and eps_norm must be positive"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::parameter("momentum must lie in (0, 1)"));
        }
        if self
            .entry
            .running_var
            .iter()
            .chain(&self.exit.running_var)
            .any(|&v| !(v >= 0.0))
        {
            return Err(Error::parameter("running variances must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StateJson {
    c: usize,
    beta_in: Vec<f64>,
    beta_out: Vec<f64>,
    eps_bn: f64,
    eps_norm: f64,
    momentum: f64,
    running_mean_in: Vec<f64>,
    running_var_in: Vec<f64>,
    running_mean_out: Vec<f64>,
    running_var_out: Vec<f64>,
}

impl TryFrom<StateJson> for GnapState {
    type Error = Error;

    fn try_from(j: StateJson) -> Result<Self> {
        let state = GnapState {
            entry: FixedGammaBn {
                beta: j.beta_in,
                running_mean: j.running_mean_in,
                running_var: j.running_var_in,
            },
            exit: FixedGammaBn {
                beta: j.beta_out,
                running_mean: j.running_mean_out,
                running_var: j.running_var_out,
            },
            eps_bn: j.eps_bn,
            eps_norm: j.eps_norm,
            momentum: j.momentum,
            mode: Mode::Inference,
        };
        if state.channels() != j.c {
            return Err(Error::contract(format!(
                "c = {} but beta_in has {} entries",
                j.c,
                state.channels()
            )));
        }
        state.validate()?;
        Ok(state)
    }
}

impl From<GnapState> for StateJson {
    fn from(s: GnapState) -> Self {
        StateJson {
            c: s.channels(),
            beta_in: s.entry.beta,
            beta_out: s.exit.beta,
            eps_bn: s.eps_bn,
            eps_norm: s.eps_norm,
            momentum: s.momentum,
            running_mean_in: s.entry.running_mean,
            running_var_in: s.entry.running_var,
            running_mean_out: s.exit.running_mean,
            running_var_out: s.exit.running_var,
        }
    }
}

/// Everything [`gnap_backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct GnapCache {
    input_shape: Shape4,
    entry: BnCache,
    norm: NormCache,
    exit: BnCache,
}

impl GnapCache {
    pub fn norm_cache(&self) -> &NormCache {
        &self.norm
    }
}

pub fn gnap_forward(x: &FeatureMap, state: &mut GnapState) -> Result<(Matrix, GnapCache)> {
    state.validate()?;
    if x.shape().c != state.channels() {
        return Err(Error::contract(format!(
            "input has {} channels, block has {}",
            x.shape().c,
            state.channels()
        )));
    }
    let settings = state.settings();
    let (normed, entry) = bn_channel_forward(x, &mut state.entry, settings)?;
    let (reweighted, norm) = reweight_owned(normed, state.eps_norm)?;
    let pooled = gap_forward(&reweighted);
    let (embedding, exit) = bn_feature_forward(&pooled, &mut state.exit, settings)?;
    Ok((
        embedding,
        GnapCache {
            input_shape: x.shape(),
            entry,
            norm,
            exit,
        },
    ))
}

/// Chain rule through the four stages. Parameter gradients are named
/// `beta_in` and `beta_out`.
pub fn gnap_backward(d_embedding: &Matrix, cache: &GnapCache) -> Result<GradBundle> {
    let s = cache.input_shape;
    if d_embedding.rows() != s.n || d_embedding.cols() != s.c {
        return Err(Error::contract(format!(
            "embedding gradient is {}x{}, expected {}x{}",
            d_embedding.rows(),
            d_embedding.cols(),
            s.n,
            s.c
        )));
    }
    let exit = bn_feature_backward(d_embedding, &cache.exit)?;
    let d_reweighted = gap_backward(&exit.d_input, s)?;
    let d_normed = reweight_backward(&d_reweighted, &cache.norm)?;
    let entry = bn_channel_backward(&d_normed.d_input, &cache.entry)?;
    let take_beta = |bundle_params: Vec<ParamGrad>| {
        bundle_params
            .into_iter()
            .find(|p| p.name == "beta")
            .map(|p| p.values)
            .unwrap_or_default()
    };
    Ok(GradBundle {
        d_input: entry.d_input,
        d_params: vec![
            ParamGrad {
                name: "beta_in",
                values: take_beta(entry.d_params),
            },
            ParamGrad {
                name: "beta_out",
                values: take_beta(exit.d_params),
            },
        ],
    })
}

/// Inference-mode embedding without caches.
///
/// Uses the running statistics regardless of `state.mode` and makes two
/// passes over each sample: one accumulating the squared local norms of the
/// normalized features, one pooling them with the reweighting ratios. Agrees
/// with an inference-mode [`gnap_forward`] to rounding.
pub fn gnap_infer(x: &FeatureMap, state: &GnapState) -> Result<Matrix> {
    state.validate()?;
    let s = x.shape();
    if s.c != state.channels() {
        return Err(Error::contract(format!(
            "input has {} channels, block has {}",
            s.c,
            state.channels()
        )));
    }
    let hw = s.spatial();
    let len = s.sample_len();
    let eps_norm = state.eps_norm;
    let inv_hw = 1.0 / hw as f64;

    let fold = |bn: &FixedGammaBn| -> (Vec<f64>, Vec<f64>) {
        bn.running_var
            .iter()
            .zip(&bn.running_mean)
            .map(|(&v, &m)| {
                let a = 1.0 / (v + state.eps_bn).sqrt();
                (a, -m * a)
            })
            .unzip()
    };
    let (scale_in, shift_in) = fold(&state.entry);
    let (scale_out, shift_out) = fold(&state.exit);
    let beta_in = &state.entry.beta;
    let beta_out = &state.exit.beta;

    let input = x.data();
    let mut out = vec![0.0; s.n * s.c];
    exec::for_each_chunk_mut(&mut out, s.c, |n, row| {
        let sample = &input[n * len..(n + 1) * len];
        let mut sq = vec![0.0; hw];
        for (c, plane) in sample.chunks_exact(hw).enumerate() {
            let (a, b) = (scale_in[c], shift_in[c] + beta_in[c]);
            for (acc, &v) in sq.iter_mut().zip(plane) {
                let y = a * v + b;
                *acc += y * y;
            }
        }
        let mut mean = 0.0;
        for r in sq.iter_mut() {
            *r = r.sqrt();
            mean += *r;
        }
        mean *= inv_hw;
        for r in sq.iter_mut() {
            let denom = r.max(eps_norm * mean);
            *r = if denom > 0.0 { mean / denom } else { 0.0 };
        }
        for (c, plane) in sample.chunks_exact(hw).enumerate() {
            let (a, b) = (scale_in[c], shift_in[c] + beta_in[c]);
            let pooled = plane
                .iter()
                .zip(&sq)
                .map(|(&v, &ratio)| ratio * (a * v + b))
                .sum::<f64>()
                * inv_hw;
            row[c] = scale_out[c] * pooled + shift_out[c] + beta_out[c];
        }
    });
    Matrix::from_vec(s.n, s.c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_permutation;

    #[test]
    fn permutation_leaves_embedding_unchanged() {
        let x = FeatureMap::randn_seeded((3, 4, 3, 3), 9, 1.0).unwrap();
        let y = x.permute_spatial(&seeded_permutation(9, 2)).unwrap();
        for mode in [Mode::Train, Mode::Inference] {
            let mut sa = GnapState::new(4).with_mode(mode);
            let mut sb = sa.clone();
            let (a, _) = gnap_forward(&x, &mut sa).unwrap();
            let (b, _) = gnap_forward(&y, &mut sb).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn uniform_norm_inference_reduces_to_gap() {
        // every local feature is a signed permutation of (1, 2, 2), norm 3
        let vals = [
            [1.0, 2.0, 2.0],
            [2.0, -1.0, 2.0],
            [-2.0, 2.0, 1.0],
            [2.0, 2.0, -1.0],
        ];
        let mut x = FeatureMap::zeros((1, 3, 2, 2)).unwrap();
        for (p, v) in vals.iter().enumerate() {
            for c in 0..3 {
                x.set(0, c, p / 2, p % 2, v[c]);
            }
        }
        let mut state = GnapState::new(3);
        let (emb, _) = gnap_forward(&x, &mut state).unwrap();
        // each BN stage divides by sqrt(1 + eps); reweight is scale-equivariant
        let shrink = 1.0 / (1.0 + state.eps_bn);
        let pooled = gap_forward(&x);
        for (a, b) in emb.data().iter().zip(pooled.data()) {
            assert!((a - b * shrink).abs() < 1e-12, "{a} vs {}", b * shrink);
        }
    }

    #[test]
    fn infer_matches_reference_path() {
        let x = FeatureMap::randn_seeded((4, 6, 3, 4), 3, 2.0).unwrap();
        let mut state = GnapState::new(6).with_mode(Mode::Train);
        // populate non-trivial running statistics and shifts
        gnap_forward(&x, &mut state).unwrap();
        state.entry.beta = (0..6).map(|c| 0.1 * c as f64).collect();
        state.exit.beta = (0..6).map(|c| -0.2 * c as f64).collect();
        let mut inference = state.clone().with_mode(Mode::Inference);
        let (reference, _) = gnap_forward(&x, &mut inference).unwrap();
        let fused = gnap_infer(&x, &state).unwrap();
        assert!(reference.max_abs_diff(&fused) < 1e-12);
    }

    #[test]
    fn zero_gradient_gives_zero() {
        let x = FeatureMap::randn_seeded((2, 3, 2, 2), 1, 1.0).unwrap();
        let mut state = GnapState::new(3).with_mode(Mode::Train);
        let (_, cache) = gnap_forward(&x, &mut state).unwrap();
        let d = gnap_backward(&Matrix::zeros(2, 3).unwrap(), &cache).unwrap();
        assert!(d.d_input.data().iter().all(|&v| v == 0.0));
        assert!(d.param("beta_in").unwrap().iter().all(|&v| v == 0.0));
        assert!(d.param("beta_out").unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_needs_train_cache_and_matching_shape() {
        let x = FeatureMap::randn_seeded((2, 3, 2, 2), 1, 1.0).unwrap();
        let (_, cache) = gnap_forward(&x, &mut GnapState::new(3)).unwrap();
        assert!(gnap_backward(&Matrix::zeros(2, 3).unwrap(), &cache).is_err());
        let (_, cache) = gnap_forward(&x, &mut GnapState::new(3).with_mode(Mode::Train)).unwrap();
        assert!(gnap_backward(&Matrix::zeros(2, 4).unwrap(), &cache).is_err());
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = FeatureMap::zeros((2, 3, 2, 2)).unwrap();
        assert!(gnap_forward(&x, &mut GnapState::new(4)).is_err());
        assert!(gnap_infer(&x, &GnapState::new(4)).is_err());
    }

    #[test]
    fn state_json_layout() {
        let state = GnapState::new(2);
        let v = serde_json::to_value(&state).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "c",
            "beta_in",
            "beta_out",
            "eps_bn",
            "eps_norm",
            "momentum",
            "running_mean_in",
            "running_var_in",
            "running_mean_out",
            "running_var_out",
        ] {
            assert!(keys.contains(&k), "missing {k}");
        }
        let back: GnapState = serde_json::from_value(v).unwrap();
        assert_eq!(back, state);

        let bad = r#"{"c":3,"beta_in":[0,0],"beta_out":[0,0],"eps_bn":1e-5,"eps_norm":1e-12,
            "momentum":0.9,"running_mean_in":[0,0],"running_var_in":[1,1],
            "running_mean_out":[0,0],"running_var_out":[1,1]}"#;
        assert!(serde_json::from_str::<GnapState>(bad).is_err());
        let negative_var = bad.replace("\"c\":3", "\"c\":2").replace("\"running_var_in\":[1,1]", "\"running_var_in\":[1,-1]");
        assert!(serde_json::from_str::<GnapState>(&negative_var).is_err());
    }
}
