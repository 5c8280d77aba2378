//! Batch normalization with the scale parameter frozen at one.
//!
//! `out = (x - mean) / sqrt(var + eps) + beta`. Only `beta` is learnable.
//! Statistics are biased batch moments in train mode and the running moments
//! in inference mode; a train-mode pass also folds the batch moments into the
//! running moments as `running = momentum * running + (1 - momentum) * batch`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{FeatureMap, Matrix};

use super::{GradBundle, ParamGrad};

pub const DEFAULT_EPS_BN: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Inference,
}

/// Which elements share statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnAxis {
    /// One statistic per channel over `(n, h, w)` of a feature map.
    PerChannel,
    /// One statistic per column over the rows of an `n x c` matrix.
    PerFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedGammaBn {
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl FixedGammaBn {
    /// Zero shift with identity running statistics.
    pub fn new(channels: usize) -> Self {
        FixedGammaBn {
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.beta.len() != channels
            || self.running_mean.len() != channels
            || self.running_var.len() != channels
        {
            return Err(Error::contract(format!(
                "batch norm has {} channels, input has {channels}",
                self.beta.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnSettings {
    pub eps: f64,
    pub momentum: f64,
    pub mode: Mode,
}

impl BnSettings {
    pub fn train() -> Self {
        BnSettings {
            eps: DEFAULT_EPS_BN,
            momentum: DEFAULT_MOMENTUM,
            mode: Mode::Train,
        }
    }

    pub fn inference() -> Self {
        BnSettings {
            mode: Mode::Inference,
            ..BnSettings::train()
        }
    }
}

/// `outer` blocks of `channels` runs of `inner` contiguous values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

impl Layout {
    fn per_channel(x: &FeatureMap) -> Self {
        let s = x.shape();
        Layout {
            outer: s.n,
            channels: s.c,
            inner: s.spatial(),
        }
    }

    fn per_feature(x: &Matrix) -> Self {
        Layout {
            outer: x.rows(),
            channels: x.cols(),
            inner: 1,
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    /// The contiguous runs of channel `c`, one per outer block.
    fn channel_runs<'a>(&self, data: &'a [f64], c: usize) -> impl Iterator<Item = &'a [f64]> {
        let block = self.channels * self.inner;
        let inner = self.inner;
        (0..self.outer).map(move |o| {
            let start = o * block + c * inner;
            &data[start..start + inner]
        })
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    axis: BnAxis,
    layout: Layout,
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BnCache {
    pub fn axis(&self) -> BnAxis {
        self.axis
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn forward_raw(
    data: &[f64],
    layout: Layout,
    axis: BnAxis,
    bn: &mut FixedGammaBn,
    settings: BnSettings,
) -> Result<(Vec<f64>, BnCache)> {
    bn.check(layout.channels)?;
    if !(settings.eps > 0.0) {
        return Err(Error::parameter("eps_bn must be positive"));
    }
    let (mean, var) = match settings.mode {
        Mode::Train => {
            if layout.count() < 2 {
                return Err(Error::contract(format!(
                    "train-mode batch norm needs at least 2 values per channel, got {}",
                    layout.count()
                )));
            }
            let count = layout.count() as f64;
            let moments: Vec<(f64, f64)> = exec::map_indices(layout.channels, |c| {
                let mean = layout
                    .channel_runs(data, c)
                    .map(|run| run.iter().sum::<f64>())
                    .sum::<f64>()
                    / count;
                let var = layout
                    .channel_runs(data, c)
                    .map(|run| run.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                (mean, var)
            });
            let m = settings.momentum;
            for (c, &(mean, var)) in moments.iter().enumerate() {
                bn.running_mean[c] = m * bn.running_mean[c] + (1.0 - m) * mean;
                bn.running_var[c] = m * bn.running_var[c] + (1.0 - m) * var;
            }
            moments.into_iter().unzip()
        }
        Mode::Inference => (bn.running_mean.clone(), bn.running_var.clone()),
    };
    let inv_std: Vec<f64> = var
        .iter()
        .map(|v| 1.0 / (v.max(0.0) + settings.eps).sqrt())
        .collect();

    let block = layout.channels * layout.inner;
    let mut xhat = vec![0.0; data.len()];
    let mut out = vec![0.0; data.len()];
    exec::for_each_chunk_pair_mut(&mut xhat, block, &mut out, block, |o, xhat, out| {
        let src = &data[o * block..(o + 1) * block];
        for c in 0..layout.channels {
            let range = c * layout.inner..(c + 1) * layout.inner;
            for k in range {
                let z = (src[k] - mean[c]) * inv_std[c];
                xhat[k] = z;
                out[k] = z + bn.beta[c];
            }
        }
    });

    Ok((
        out,
        BnCache {
            axis,
            layout,
            mode: settings.mode,
            xhat,
            inv_std,
        },
    ))
}

fn backward_raw(grad: &[f64], cache: &BnCache) -> Result<(Vec<f64>, Vec<f64>)> {
    if cache.mode != Mode::Train {
        return Err(Error::contract(
            "batch norm backward needs a train-mode cache",
        ));
    }
    let layout = cache.layout;
    if grad.len() != cache.xhat.len() {
        return Err(Error::contract(format!(
            "gradient has {} values, cache has {}",
            grad.len(),
            cache.xhat.len()
        )));
    }
    let count = layout.count() as f64;
    let sums: Vec<(f64, f64)> = exec::map_indices(layout.channels, |c| {
        layout
            .channel_runs(grad, c)
            .zip(layout.channel_runs(&cache.xhat, c))
            .fold((0.0, 0.0), |(sg, sgx), (g, x)| {
                let run_g: f64 = g.iter().sum();
                let run_gx: f64 = g.iter().zip(x).map(|(a, b)| a * b).sum();
                (sg + run_g, sgx + run_gx)
            })
    });

    let block = layout.channels * layout.inner;
    let mut dx = vec![0.0; grad.len()];
    exec::for_each_chunk_mut(&mut dx, block, |o, dx| {
        let base = o * block;
        for c in 0..layout.channels {
            let (sg, sgx) = sums[c];
            let mean_g = sg / count;
            let mean_gx = sgx / count;
            for k in c * layout.inner..(c + 1) * layout.inner {
                dx[k] = cache.inv_std[c] * (grad[base + k] - mean_g - cache.xhat[base + k] * mean_gx);
            }
        }
    });
    let d_beta = sums.into_iter().map(|(sg, _)| sg).collect();
    Ok((dx, d_beta))
}

/// Per-channel batch norm over `(n, h, w)`.
pub fn bn_channel_forward(
    x: &FeatureMap,
    bn: &mut FixedGammaBn,
    settings: BnSettings,
) -> Result<(FeatureMap, BnCache)> {
    let (out, cache) = forward_raw(x.data(), Layout::per_channel(x), BnAxis::PerChannel, bn, settings)?;
    Ok((FeatureMap::from_vec(x.shape(), out)?, cache))
}

/// Per-feature batch norm over the rows of an `n x c` embedding.
pub fn bn_feature_forward(
    x: &Matrix,
    bn: &mut FixedGammaBn,
    settings: BnSettings,
) -> Result<(Matrix, BnCache)> {
    let (out, cache) = forward_raw(x.data(), Layout::per_feature(x), BnAxis::PerFeature, bn, settings)?;
    Ok((Matrix::from_vec(x.rows(), x.cols(), out)?, cache))
}

pub fn bn_channel_backward(d_out: &FeatureMap, cache: &BnCache) -> Result<GradBundle> {
    if cache.axis != BnAxis::PerChannel || Layout::per_channel(d_out) != cache.layout {
        return Err(Error::contract("per-channel gradient does not match cache"));
    }
    let (dx, d_beta) = backward_raw(d_out.data(), cache)?;
    Ok(GradBundle {
        d_input: FeatureMap::from_vec(d_out.shape(), dx)?,
        d_params: vec![ParamGrad {
            name: "beta",
            values: d_beta,
        }],
    })
}

pub fn bn_feature_backward(d_out: &Matrix, cache: &BnCache) -> Result<GradBundle<Matrix>> {
    if cache.axis != BnAxis::PerFeature || Layout::per_feature(d_out) != cache.layout {
        return Err(Error::contract("per-feature gradient does not match cache"));
    }
    let (dx, d_beta) = backward_raw(d_out.data(), cache)?;
    Ok(GradBundle {
        d_input: Matrix::from_vec(d_out.rows(), d_out.cols(), dx)?,
        d_params: vec![ParamGrad {
            name: "beta",
            values: d_beta,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_stats(x: &FeatureMap, c: usize) -> (f64, f64) {
        let s = x.shape();
        let vals: Vec<f64> = (0..s.n)
            .flat_map(|n| (0..s.h).flat_map(move |i| (0..s.w).map(move |j| (n, i, j))))
            .map(|(n, i, j)| x.get(n, c, i, j))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn standardized_input_passes_through() {
        // per channel: values {-1, 1} repeated, mean 0 variance 1
        let x = FeatureMap::from_vec((2, 2, 1, 2), vec![-1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0])
            .unwrap();
        let mut bn = FixedGammaBn::new(2);
        let (out, _) = bn_channel_forward(&x, &mut bn, BnSettings::train()).unwrap();
        let shrink = 1.0 / (1.0 + DEFAULT_EPS_BN).sqrt();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b * shrink).abs() < 1e-12);
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn train_output_is_standardized() {
        let x = FeatureMap::randn_seeded((3, 4, 3, 3), 2, 2.5).unwrap();
        let mut bn = FixedGammaBn::new(4);
        let (out, _) = bn_channel_forward(&x, &mut bn, BnSettings::train()).unwrap();
        for c in 0..4 {
            let (_, var_in) = channel_stats(&x, c);
            let (mean, var) = channel_stats(&out, c);
            assert!(mean.abs() < 1e-9);
            let expected = var_in / (var_in + DEFAULT_EPS_BN);
            assert!((var - expected).abs() < 1e-9, "{var} vs {expected}");
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = FeatureMap::randn_seeded((2, 2, 2, 2), 4, 3.0).unwrap();
        let mut bn = FixedGammaBn::new(2);
        bn_channel_forward(&x, &mut bn, BnSettings::train()).unwrap();
        for c in 0..2 {
            let (mean, var) = channel_stats(&x, c);
            assert!((bn.running_mean[c] - 0.1 * mean).abs() < 1e-12);
            assert!((bn.running_var[c] - (0.9 + 0.1 * var)).abs() < 1e-12);
        }
    }

    #[test]
    fn inference_uses_running_stats() {
        let x = FeatureMap::randn_seeded((1, 2, 2, 2), 4, 1.0).unwrap();
        let mut bn = FixedGammaBn {
            beta: vec![0.5, -1.0],
            running_mean: vec![1.0, 2.0],
            running_var: vec![4.0, 0.25],
        };
        let before = bn.clone();
        let (out, cache) = bn_channel_forward(&x, &mut bn, BnSettings::inference()).unwrap();
        assert_eq!(bn, before);
        let v = (x.get(0, 1, 1, 0) - 2.0) / (0.25 + DEFAULT_EPS_BN).sqrt() - 1.0;
        assert!((out.get(0, 1, 1, 0) - v).abs() < 1e-12);
        let g = FeatureMap::zeros(x.shape()).unwrap();
        assert!(matches!(bn_channel_backward(&g, &cache), Err(Error::Contract(_))));
    }

    #[test]
    fn scale_invariant_in_train_mode() {
        // invariance is exact once eps is negligible against the variance
        let x = FeatureMap::randn_seeded((2, 3, 2, 2), 8, 1.0).unwrap();
        let settings = BnSettings {
            eps: 1e-30,
            ..BnSettings::train()
        };
        let (a, _) = bn_channel_forward(&x, &mut FixedGammaBn::new(3), settings).unwrap();
        for alpha in [1e-3, 0.5, 7.0, 1e3] {
            let (b, _) =
                bn_channel_forward(&x.scale(alpha), &mut FixedGammaBn::new(3), settings).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "alpha {alpha}");
        }
    }

    #[test]
    fn scaling_input_rescales_eps() {
        // bn_eps(alpha x) == bn_{eps / alpha^2}(x)
        let x = FeatureMap::randn_seeded((2, 3, 2, 2), 8, 1.0).unwrap();
        let alpha = 4.0;
        let (a, _) =
            bn_channel_forward(&x.scale(alpha), &mut FixedGammaBn::new(3), BnSettings::train()).unwrap();
        let settings = BnSettings {
            eps: DEFAULT_EPS_BN / (alpha * alpha),
            ..BnSettings::train()
        };
        let (b, _) = bn_channel_forward(&x, &mut FixedGammaBn::new(3), settings).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn insufficient_batch_is_rejected() {
        let x = FeatureMap::zeros((1, 2, 1, 1)).unwrap();
        let r = bn_channel_forward(&x, &mut FixedGammaBn::new(2), BnSettings::train());
        assert!(matches!(r, Err(Error::Contract(_))));
        let m = Matrix::zeros(1, 3).unwrap();
        let r = bn_feature_forward(&m, &mut FixedGammaBn::new(3), BnSettings::train());
        assert!(matches!(r, Err(Error::Contract(_))));
        // inference has no batch requirement
        assert!(bn_feature_forward(&m, &mut FixedGammaBn::new(3), BnSettings::inference()).is_ok());
    }

    #[test]
    fn channel_count_mismatch_is_rejected() {
        let x = FeatureMap::zeros((2, 2, 1, 1)).unwrap();
        let r = bn_channel_forward(&x, &mut FixedGammaBn::new(3), BnSettings::train());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_gradient_and_beta_sum() {
        let x = FeatureMap::randn_seeded((2, 3, 2, 2), 1, 1.0).unwrap();
        let (_, cache) = bn_channel_forward(&x, &mut FixedGammaBn::new(3), BnSettings::train()).unwrap();
        let zero = bn_channel_backward(&FeatureMap::zeros(x.shape()).unwrap(), &cache).unwrap();
        assert!(zero.d_input.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero.param("beta").unwrap(), &[0.0; 3]);
        assert!(zero.param("gamma").is_none());

        let g = FeatureMap::randn_seeded(x.shape(), 2, 1.0).unwrap();
        let d = bn_channel_backward(&g, &cache).unwrap();
        for c in 0..3 {
            let (mean, _) = channel_stats(&g, c);
            let sum = mean * 8.0;
            assert!((d.param("beta").unwrap()[c] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_axis_normalizes_columns() {
        let m = Matrix::from_vec(3, 2, vec![1.0, 10.0, 2.0, 20.0, 3.0, 60.0]).unwrap();
        let mut bn = FixedGammaBn::new(2);
        let (out, cache) = bn_feature_forward(&m, &mut bn, BnSettings::train()).unwrap();
        assert_eq!(cache.axis(), BnAxis::PerFeature);
        for c in 0..2 {
            let col: f64 = (0..3).map(|r| out.get(r, c)).sum();
            assert!(col.abs() < 1e-12);
        }
        let wrong = FeatureMap::zeros((3, 2, 1, 1)).unwrap();
        assert!(bn_channel_backward(&wrong, &cache).is_err());
    }
}
