use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{FeatureMap, Matrix, Shape4};

/// Global average pooling: `out[n, c]` is the mean of channel `c` of sample
/// `n` over all spatial positions, summed in position order.
pub fn gap_forward(x: &FeatureMap) -> Matrix {
    let s = x.shape();
    let hw = s.spatial();
    let inv = 1.0 / hw as f64;
    let input = x.data();
    let mut out = vec![0.0; s.n * s.c];
    exec::for_each_chunk_mut(&mut out, s.c, |n, row| {
        let sample = &input[n * s.sample_len()..(n + 1) * s.sample_len()];
        for (dst, plane) in row.iter_mut().zip(sample.chunks_exact(hw)) {
            *dst = plane.iter().sum::<f64>() * inv;
        }
    });
    Matrix::from_vec(s.n, s.c, out).expect("shape checked by input")
}

pub fn gap_backward(d_out: &Matrix, input_shape: Shape4) -> Result<FeatureMap> {
    if d_out.rows() != input_shape.n || d_out.cols() != input_shape.c {
        return Err(Error::contract(format!(
            "pooled gradient is {}x{}, input shape is {:?}",
            d_out.rows(),
            d_out.cols(),
            input_shape.as_array()
        )));
    }
    let hw = input_shape.spatial();
    let inv = 1.0 / hw as f64;
    let mut dx = FeatureMap::zeros(input_shape)?;
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(d_out.data()) {
        plane.fill(g * inv);
    }
    Ok(dx)
}
