use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, Matrix};

use super::{GradBundle, ParamGrad};

/// Inputs saved by [`fc_head_forward`].
#[derive(Debug, Clone)]
pub struct FcCache {
    input: FeatureMap,
    weights: Matrix,
}

/// Fully connected head on the flattened `(c, h, w)` sample:
/// `out = flatten(x) * weights + bias`.
///
/// Every input unit gets its own weight, so unlike the pooling heads this one
/// is not invariant to spatial permutations.
pub fn fc_head_forward(x: &FeatureMap, weights: &Matrix, bias: &[f64]) -> Result<(Matrix, FcCache)> {
    let s = x.shape();
    let fan_in = s.sample_len();
    if weights.rows() != fan_in {
        return Err(Error::contract(format!(
            "fc weights have {} rows, flattened input has {fan_in}",
            weights.rows()
        )));
    }
    let d = weights.cols();
    if bias.len() != d {
        return Err(Error::contract(format!("bias has {} entries, expected {d}", bias.len())));
    }
    let mut out = Matrix::zeros(s.n, d)?;
    for n in 0..s.n {
        let row = &mut out.data_mut()[n * d..(n + 1) * d];
        row.copy_from_slice(bias);
        for (k, &v) in x.sample(n).iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(weights.row(k)) {
                *o += v * wv;
            }
        }
    }
    Ok((
        out,
        FcCache {
            input: x.clone(),
            weights: weights.clone(),
        },
    ))
}

pub fn fc_head_backward(d_out: &Matrix, cache: &FcCache) -> Result<GradBundle> {
    let s = cache.input.shape();
    let d = cache.weights.cols();
    if d_out.rows() != s.n || d_out.cols() != d {
        return Err(Error::contract(format!(
            "fc gradient is {}x{}, expected {}x{d}",
            d_out.rows(),
            d_out.cols(),
            s.n
        )));
    }
    let fan_in = s.sample_len();
    let mut dx = FeatureMap::zeros(s)?;
    let mut dw = vec![0.0; fan_in * d];
    let mut db = vec![0.0; d];
    for n in 0..s.n {
        let g = d_out.row(n);
        let x = cache.input.sample(n);
        let dxs = &mut dx.data_mut()[n * fan_in..(n + 1) * fan_in];
        for k in 0..fan_in {
            let w = cache.weights.row(k);
            dxs[k] = w.iter().zip(g).map(|(a, b)| a * b).sum();
            for (dst, &gv) in dw[k * d..(k + 1) * d].iter_mut().zip(g) {
                *dst += x[k] * gv;
            }
        }
        for (dst, &gv) in db.iter_mut().zip(g) {
            *dst += gv;
        }
    }
    Ok(GradBundle {
        d_input: dx,
        d_params: vec![
            ParamGrad {
                name: "weights",
                values: dw,
            },
            ParamGrad {
                name: "bias",
                values: db,
            },
        ],
    })
}
