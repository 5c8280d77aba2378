use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{FeatureMap, Matrix, Shape4};

use super::{GradBundle, ParamGrad};

#[derive(Debug, Clone)]
pub struct PointwiseCache {
    input: FeatureMap,
    weights: Matrix,
}

/// 1x1 convolution: the local feature at every position is multiplied by the
/// same `c_in x c_out` matrix.
pub fn pointwise_conv_forward(x: &FeatureMap, weights: &Matrix) -> Result<(FeatureMap, PointwiseCache)> {
    let s = x.shape();
    if weights.rows() != s.c {
        return Err(Error::contract(format!(
            "pointwise weights have {} rows, input has {} channels",
            weights.rows(),
            s.c
        )));
    }
    let c_out = weights.cols();
    let out_shape = Shape4::new(s.n, c_out, s.h, s.w);
    let hw = s.spatial();
    let input = x.data();
    let mut out = FeatureMap::zeros(out_shape)?;
    exec::for_each_chunk_mut(out.data_mut(), out_shape.sample_len(), |n, dst| {
        let src = &input[n * s.sample_len()..(n + 1) * s.sample_len()];
        for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
            for (c, src_plane) in src.chunks_exact(hw).enumerate() {
                let wv = weights.get(c, o);
                for (d, &v) in plane.iter_mut().zip(src_plane) {
                    *d += wv * v;
                }
            }
        }
    });
    Ok((
        out,
        PointwiseCache {
            input: x.clone(),
            weights: weights.clone(),
        },
    ))
}

pub fn pointwise_conv_backward(d_out: &FeatureMap, cache: &PointwiseCache) -> Result<GradBundle> {
    let s = cache.input.shape();
    let c_out = cache.weights.cols();
    let g_shape = d_out.shape();
    if g_shape != Shape4::new(s.n, c_out, s.h, s.w) {
        return Err(Error::contract(format!(
            "pointwise gradient shape {:?} does not match output {:?}",
            g_shape.as_array(),
            [s.n, c_out, s.h, s.w]
        )));
    }
    let hw = s.spatial();
    let mut dx = FeatureMap::zeros(s)?;
    let mut dw = vec![0.0; s.c * c_out];
    for n in 0..s.n {
        let x = cache.input.sample(n);
        let g = d_out.sample(n);
        let dxs = &mut dx.data_mut()[n * s.sample_len()..(n + 1) * s.sample_len()];
        for c in 0..s.c {
            let xp = &x[c * hw..(c + 1) * hw];
            for o in 0..c_out {
                let gp = &g[o * hw..(o + 1) * hw];
                let wv = cache.weights.get(c, o);
                let mut acc = 0.0;
                for p in 0..hw {
                    dxs[c * hw + p] += wv * gp[p];
                    acc += xp[p] * gp[p];
                }
                dw[c * c_out + o] += acc;
            }
        }
    }
    Ok(GradBundle {
        d_input: dx,
        d_params: vec![ParamGrad {
            name: "weights",
            values: dw,
        }],
    })
}
