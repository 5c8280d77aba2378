//! Norm-aware reweighting.
//!
//! Every local feature (the `c`-vector at one spatial position) is rescaled
//! so that its L2 norm becomes the mean local norm of its sample:
//!
//! ```text
//! r[p]   = sqrt(sum_c x[c,p]^2)
//! m      = (1 / hw) * sum_p r[p]
//! out[c,p] = m / max(r[p], eps * m) * x[c,p]
//! ```
//!
//! The mean is taken per sample, never across the batch. The clamp
//! `max(r, eps * m)` only engages for local features whose norm is below
//! `eps` times the sample mean; it removes the zero-norm singularity while
//! keeping the ratio exactly homogeneous of degree zero in `x`. A sample
//! whose features are all zero maps to zero.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{FeatureMap, Shape4};

use super::GradBundle;

pub const DEFAULT_EPS_NORM: f64 = 1e-12;

/// Per-sample grid of local-feature norms, indexed `[n][i * w + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormGrid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl NormGrid {
    pub fn get(&self, n: usize, i: usize, j: usize) -> f64 {
        self.data[(n * self.h + i) * self.w + j]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let hw = self.h * self.w;
        &self.data[n * hw..(n + 1) * hw]
    }
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub local_norms: NormGrid,
    pub mean_norm: Vec<f64>,
    pub saved_input: FeatureMap,
    pub eps_norm: f64,
}

fn sample_norms(sample: &[f64], hw: usize, norms: &mut [f64]) {
    norms.fill(0.0);
    for plane in sample.chunks_exact(hw) {
        for (acc, &v) in norms.iter_mut().zip(plane) {
            *acc += v * v;
        }
    }
    for r in norms.iter_mut() {
        *r = r.sqrt();
    }
}

fn sample_mean(norms: &[f64]) -> f64 {
    norms.iter().sum::<f64>() / norms.len() as f64
}

#[inline]
fn ratio(r: f64, m: f64, eps: f64) -> f64 {
    let denom = r.max(eps * m);
    if denom > 0.0 {
        m / denom
    } else {
        0.0
    }
}

pub fn local_norms(x: &FeatureMap) -> NormGrid {
    let s = x.shape();
    let hw = s.spatial();
    let mut data = vec![0.0; s.n * hw];
    let input = x.data();
    exec::for_each_chunk_mut(&mut data, hw, |n, norms| {
        sample_norms(&input[n * s.sample_len()..(n + 1) * s.sample_len()], hw, norms)
    });
    NormGrid {
        n: s.n,
        h: s.h,
        w: s.w,
        data,
    }
}

pub fn mean_norm(norms: &NormGrid) -> Vec<f64> {
    let hw = norms.h * norms.w;
    norms.data.chunks_exact(hw).map(sample_mean).collect()
}

pub fn reweight(x: &FeatureMap, eps_norm: f64) -> Result<(FeatureMap, NormCache)> {
    reweight_owned(x.clone(), eps_norm)
}

/// [`reweight`] taking ownership of the input, which the cache keeps.
pub fn reweight_owned(x: FeatureMap, eps_norm: f64) -> Result<(FeatureMap, NormCache)> {
    if !(eps_norm > 0.0) {
        return Err(Error::parameter(format!("eps_norm must be positive, got {eps_norm}")));
    }
    let s = x.shape();
    let hw = s.spatial();
    let len = s.sample_len();
    let input = x.data();

    let mut out = vec![0.0; x.len()];
    let mut norms = vec![0.0; s.n * hw];
    exec::for_each_chunk_pair_mut(&mut out, len, &mut norms, hw, |n, out, norms| {
        let sample = &input[n * len..(n + 1) * len];
        sample_norms(sample, hw, norms);
        let m = sample_mean(norms);
        let ratios: Vec<f64> = norms.iter().map(|&r| ratio(r, m, eps_norm)).collect();
        for (dst, src) in out.chunks_exact_mut(hw).zip(sample.chunks_exact(hw)) {
            for ((d, &v), &k) in dst.iter_mut().zip(src).zip(&ratios) {
                *d = k * v;
            }
        }
    });

    let local_norms = NormGrid {
        n: s.n,
        h: s.h,
        w: s.w,
        data: norms,
    };
    let mean_norm = mean_norm(&local_norms);
    let out = FeatureMap::from_vec(s, out)?;
    Ok((
        out,
        NormCache {
            local_norms,
            mean_norm,
            saved_input: x,
            eps_norm,
        },
    ))
}

/// Exact vector-Jacobian product of [`reweight`], differentiating through
/// both the local norms and the per-sample mean norm.
///
/// For a position `q` with `r[q] >= eps * m` (the unclamped branch), and
/// `G[p] = sum_c g[c,p] x[c,p]`, `A = sum_{unclamped p} G[p] / r[p]`:
///
/// ```text
/// dx[c,q] = A x[c,q] / (hw r[q]) + (m / r[q]) (g[c,q] - G[q] x[c,q] / r[q]^2)
/// ```
///
/// Clamped positions contribute `g / eps` directly. The mean-norm term is
/// dropped where `r[q] = 0`, which selects the zero subgradient of the norm.
pub fn reweight_backward(d_out: &FeatureMap, cache: &NormCache) -> Result<GradBundle> {
    let s: Shape4 = cache.saved_input.shape();
    if d_out.shape() != s {
        return Err(Error::contract(format!(
            "gradient shape {:?} does not match cached input {:?}",
            d_out.shape().as_array(),
            s.as_array()
        )));
    }
    let hw = s.spatial();
    let len = s.sample_len();
    let eps = cache.eps_norm;
    let input = cache.saved_input.data();
    let grad = d_out.data();

    let mut dx = vec![0.0; input.len()];
    exec::for_each_chunk_mut(&mut dx, len, |n, dx| {
        let x = &input[n * len..(n + 1) * len];
        let g = &grad[n * len..(n + 1) * len];
        let r = cache.local_norms.sample(n);
        let m = cache.mean_norm[n];

        let mut proj = vec![0.0; hw];
        for (xp, gp) in x.chunks_exact(hw).zip(g.chunks_exact(hw)) {
            for p in 0..hw {
                proj[p] += gp[p] * xp[p];
            }
        }
        let unclamped = |p: usize| r[p] > 0.0 && r[p] >= eps * m;
        let a: f64 = (0..hw).filter(|&p| unclamped(p)).map(|p| proj[p] / r[p]).sum();
        let hw_f = hw as f64;

        for ((dxp, xp), gp) in dx
            .chunks_exact_mut(hw)
            .zip(x.chunks_exact(hw))
            .zip(g.chunks_exact(hw))
        {
            for p in 0..hw {
                let mut v = if r[p] > 0.0 {
                    a * xp[p] / (hw_f * r[p])
                } else {
                    0.0
                };
                if unclamped(p) {
                    v += m / r[p] * (gp[p] - proj[p] * xp[p] / (r[p] * r[p]));
                } else if eps * m > 0.0 {
                    v += gp[p] / eps;
                }
                dxp[p] = v;
            }
        }
    });

    Ok(GradBundle::input_only(FeatureMap::from_vec(s, dx)?))
}
