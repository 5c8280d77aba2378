use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub d_embeddings: Matrix,
    pub d_class_weights: Matrix,
}

fn unit(v: &[f64]) -> Option<(Vec<f64>, f64)> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| (v.iter().map(|x| x / norm).collect(), norm))
}

/// Back through `u = v / |v|`: `dv = (du - u (u . du)) / |v|`.
fn unit_backward(u: &[f64], norm: f64, du: &[f64]) -> Vec<f64> {
    let proj: f64 = u.iter().zip(du).map(|(a, b)| a * b).sum();
    u.iter().zip(du).map(|(a, g)| (g - a * proj) / norm).collect()
}

/// Additive angular margin softmax loss, averaged over rows.
///
/// `embeddings` is `n x d`, `class_weights` is `d x k` with one column per
/// class. Both are L2-normalized before taking cosines, so the loss only
/// sees directions. The true-class logit is `s cos(theta + margin)` and the
/// others are `s cos(theta)`.
pub fn angular_margin_loss(
    embeddings: &Matrix,
    class_weights: &Matrix,
    labels: &[usize],
    margin: f64,
    scale_s: f64,
) -> Result<LossOutput> {
    let (n, d) = (embeddings.rows(), embeddings.cols());
    let k = class_weights.cols();
    if class_weights.rows() != d {
        return Err(Error::contract(format!(
            "class weights have {} rows, embeddings have {d} columns",
            class_weights.rows()
        )));
    }
    if labels.len() != n || labels.iter().any(|&y| y >= k) {
        return Err(Error::contract("labels must give one class index below k per row"));
    }

    let mut e_hat = Vec::with_capacity(n);
    for r in 0..n {
        e_hat.push(unit(embeddings.row(r)).ok_or_else(|| {
            Error::contract(format!("embedding row {r} has zero norm"))
        })?);
    }
    let mut w_hat = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = (0..d).map(|i| class_weights.get(i, j)).collect();
        w_hat.push(unit(&col).ok_or_else(|| {
            Error::contract(format!("class weight column {j} has zero norm"))
        })?);
    }

    let (cos_m, sin_m) = (margin.cos(), margin.sin());
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut d_e_hat = vec![vec![0.0; d]; n];
    let mut d_w_hat = vec![vec![0.0; d]; k];
    let mut logits = vec![0.0; k];
    let mut d_cos = vec![0.0; k];

    for r in 0..n {
        let y = labels[r];
        let (e, _) = &e_hat[r];
        for (j, (w, _)) in w_hat.iter().enumerate() {
            let cos: f64 = e.iter().zip(w).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0);
            logits[j] = scale_s * cos;
            d_cos[j] = cos;
        }
        let cos_y = d_cos[y];
        let sin_y = (1.0 - cos_y * cos_y).max(0.0).sqrt();
        logits[y] = scale_s * (cos_y * cos_m - sin_y * sin_m);

        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        loss += (max + denom.ln() - logits[y]) * inv_n;

        for j in 0..k {
            let p = (logits[j] - max).exp() / denom;
            let dz = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
            let dz_dcos = if j == y {
                scale_s * (cos_m + sin_m * cos_y / sin_y.max(1e-12))
            } else {
                scale_s
            };
            d_cos[j] = dz * dz_dcos;
        }
        for (j, (w, _)) in w_hat.iter().enumerate() {
            for i in 0..d {
                d_e_hat[r][i] += d_cos[j] * w[i];
                d_w_hat[j][i] += d_cos[j] * e[i];
            }
        }
    }

    let mut d_embeddings = Matrix::zeros(n, d)?;
    for r in 0..n {
        let (u, norm) = &e_hat[r];
        let g = unit_backward(u, *norm, &d_e_hat[r]);
        d_embeddings.data_mut()[r * d..(r + 1) * d].copy_from_slice(&g);
    }
    let mut d_class_weights = Matrix::zeros(d, k)?;
    for j in 0..k {
        let (u, norm) = &w_hat[j];
        let g = unit_backward(u, *norm, &d_w_hat[j]);
        for i in 0..d {
            d_class_weights.set(i, j, g[i]);
        }
    }

    Ok(LossOutput {
        loss,
        d_embeddings,
        d_class_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_margin_is_normalized_softmax() {
        let e = Matrix::randn_seeded(4, 3, 1, 1.0).unwrap();
        let w = Matrix::randn_seeded(3, 5, 2, 1.0).unwrap();
        let labels = [0, 3, 4, 1];
        let out = angular_margin_loss(&e, &w, &labels, 0.0, 2.0).unwrap();

        let mut expected = 0.0;
        for r in 0..4 {
            let en = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let logits: Vec<f64> = (0..5)
                .map(|j| {
                    let wn = (0..3).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt();
                    2.0 * (0..3).map(|i| e.get(r, i) * w.get(i, j)).sum::<f64>() / (en * wn)
                })
                .collect();
            let lse = logits.iter().map(|z| z.exp()).sum::<f64>().ln();
            expected += (lse - logits[labels[r]]) / 4.0;
        }
        assert!((out.loss - expected).abs() < 1e-12);
    }

    #[test]
    fn aligned_embedding_saturates() {
        let w = Matrix::identity(3).unwrap();
        let e = Matrix::from_vec(2, 3, vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.5]).unwrap();
        let out = angular_margin_loss(&e, &w, &[0, 2], 0.0, 64.0).unwrap();
        assert!(out.loss < 1e-26, "{}", out.loss);
    }

    #[test]
    fn row_scale_invariance() {
        let e = Matrix::randn_seeded(3, 4, 5, 1.0).unwrap();
        let w = Matrix::randn_seeded(4, 6, 6, 1.0).unwrap();
        let a = angular_margin_loss(&e, &w, &[1, 2, 5], 0.3, 16.0).unwrap().loss;
        let b = angular_margin_loss(&e.scale(37.5), &w, &[1, 2, 5], 0.3, 16.0).unwrap().loss;
        assert!((a - b).abs() <= 1e-9 * a.abs());
    }

    #[test]
    fn margin_raises_the_loss() {
        let e = Matrix::randn_seeded(8, 4, 5, 1.0).unwrap();
        let w = Matrix::randn_seeded(4, 3, 6, 1.0).unwrap();
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let plain = angular_margin_loss(&e, &w, &labels, 0.0, 8.0).unwrap().loss;
        let margined = angular_margin_loss(&e, &w, &labels, 0.3, 8.0).unwrap().loss;
        assert!(margined > plain);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let w = Matrix::randn_seeded(2, 3, 1, 1.0).unwrap();
        let zero_row = Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            angular_margin_loss(&zero_row, &w, &[0], 0.1, 8.0),
            Err(Error::Contract(_))
        ));
        let zero_col = Matrix::zeros(2, 3).unwrap();
        let e = Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(angular_margin_loss(&e, &zero_col, &[0], 0.1, 8.0).is_err());
        assert!(angular_margin_loss(&e, &w, &[3], 0.1, 8.0).is_err());
    }
}
