//! Gradient certification of every backward pass against the
//! central-difference oracle.
//!
//! Each layer is reduced to a scalar by projecting its output onto a fixed
//! random direction `v`, so the analytic gradient is the layer's backward
//! pass applied to `v`.

use crate::error::{Error, Result};
use crate::gradcheck::{compare, compare_slices, numerical_gradient, numerical_gradient_slice, GradCheckReport};
use crate::layers::{
    bn_channel_backward, bn_channel_forward, bn_feature_backward, bn_feature_forward, fc_head_backward,
    fc_head_forward, gap_backward, gap_forward, gnap_backward, gnap_forward, pointwise_conv_backward,
    pointwise_conv_forward, reweight, reweight_backward, BnSettings, FixedGammaBn, GnapState, Mode,
    DEFAULT_EPS_NORM,
};
use crate::tensor::{FeatureMap, Matrix, NormalStream, Shape4};
use crate::toy::angular_margin_loss;

pub const LAYERS: &[&str] = &[
    "reweight",
    "bn-channel",
    "bn-feature",
    "gap",
    "fc",
    "pointwise",
    "gnap",
    "angular-loss",
];

/// Input shape shared by the layer checks.
pub const REFERENCE_SHAPE: Shape4 = Shape4::new(2, 3, 4, 4);

/// The full block needs more than two samples: with a batch of two the exit
/// normalization maps every feature to roughly +-1 and the input gradient
/// shrinks to the size of `eps_bn`, below central-difference resolution.
pub const GNAP_SHAPE: Shape4 = Shape4::new(4, 3, 4, 4);

fn sub_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x100_0000_01b3).wrapping_add(k)
}

fn seeded_vec(len: usize, seed: u64, std: f64) -> Vec<f64> {
    let mut rng = NormalStream::new(seed);
    (0..len).map(|_| std * rng.next()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Runs the oracle for one layer and one seed, returning one report per
/// gradient (input first, then parameters).
pub fn certify(layer: &str, seed: u64, tolerance: f64, step: f64) -> Result<Vec<GradCheckReport>> {
    let s = |k| sub_seed(seed, k);
    let name = |part: &str| format!("{layer}/{part}/seed{seed}");
    match layer {
        "reweight" => {
            let x = FeatureMap::randn_seeded(REFERENCE_SHAPE, s(0), 1.0)?;
            let v = FeatureMap::randn_seeded(REFERENCE_SHAPE, s(1), 1.0)?;
            let (_, cache) = reweight(&x, DEFAULT_EPS_NORM)?;
            let analytic = reweight_backward(&v, &cache)?.d_input;
            let numeric = numerical_gradient(
                |p| reweight(p, DEFAULT_EPS_NORM).expect("valid").0.dot(&v),
                &x,
                step,
            )?;
            Ok(vec![compare(&name("input"), &analytic, &numeric, tolerance, step)?])
        }
        "bn-channel" => {
            let x = FeatureMap::randn_seeded(REFERENCE_SHAPE, s(0), 2.0)?.map(|t| t + 0.5);
            let v = FeatureMap::randn_seeded(REFERENCE_SHAPE, s(1), 1.0)?;
            let mut bn = FixedGammaBn::new(3);
            bn.beta = seeded_vec(3, s(2), 0.5);
            let settings = BnSettings::train();
            let (_, cache) = bn_channel_forward(&x, &mut bn.clone(), settings)?;
            let g = bn_channel_backward(&v, &cache)?;
            let f_x = |p: &FeatureMap| bn_channel_forward(p, &mut bn.clone(), settings).expect("valid").0.dot(&v);
            let numeric_x = numerical_gradient(f_x, &x, step)?;
            let numeric_b = numerical_gradient_slice(
                |beta| {
                    let mut probe = bn.clone();
                    probe.beta = beta.to_vec();
                    bn_channel_forward(&x, &mut probe, settings).expect("valid").0.dot(&v)
                },
                &bn.beta,
                step,
            )?;
            Ok(vec![
                compare(&name("input"), &g.d_input, &numeric_x, tolerance, step)?,
                compare_slices(&name("beta"), g.param("beta").unwrap_or_default(), &numeric_b, tolerance, step)?,
            ])
        }
        "bn-feature" => {
            let (rows, cols) = (6, 4);
            let x = Matrix::randn_seeded(rows, cols, s(0), 1.5)?;
            let v = Matrix::randn_seeded(rows, cols, s(1), 1.0)?;
            let mut bn = FixedGammaBn::new(cols);
            bn.beta = seeded_vec(cols, s(2), 0.5);
            let settings = BnSettings::train();
            let (_, cache) = bn_feature_forward(&x, &mut bn.clone(), settings)?;
            let g = bn_feature_backward(&v, &cache)?;
            let numeric_x = numerical_gradient_slice(
                |p| {
                    let m = Matrix::from_vec(rows, cols, p.to_vec()).expect("shape");
                    bn_feature_forward(&m, &mut bn.clone(), settings).expect("valid").0.dot(&v)
                },
                x.data(),
                step,
            )?;
            let numeric_b = numerical_gradient_slice(
                |beta| {
                    let mut probe = bn.clone();
                    probe.beta = beta.to_vec();
                    bn_feature_forward(&x, &mut probe, settings).expect("valid").0.dot(&v)
                },
                &bn.beta,
                step,
            )?;
            Ok(vec![
                compare_slices(&name("input"), g.d_input.data(), &numeric_x, tolerance, step)?,
                compare_slices(&name("beta"), g.param("beta").unwrap_or_default(), &numeric_b, tolerance, step)?,
            ])
        }
        "gap" => {
            let x = FeatureMap::randn_seeded(REFERENCE_SHAPE, s(0), 1.0)?;
            let v = Matrix::randn_seeded(2, 3, s(1), 1.0)?;
            let analytic = gap_backward(&v, x.shape())?;
            let numeric = numerical_gradient(|p| gap_forward(p).dot(&v), &x, step)?;
            Ok(vec![compare(&name("input"), &analytic, &numeric, tolerance, step)?])
        }
        "fc" => {
            let shape = Shape4::new(2, 3, 2, 2);
            let x = FeatureMap::randn_seeded(shape, s(0), 1.0)?;
            let w = Matrix::randn_seeded(12, 5, s(1), 0.5)?;
            let b = seeded_vec(5, s(2), 0.5);
            let v = Matrix::randn_seeded(2, 5, s(3), 1.0)?;
            let (_, cache) = fc_head_forward(&x, &w, &b)?;
            let g = fc_head_backward(&v, &cache)?;
            let numeric_x = numerical_gradient(|p| fc_head_forward(p, &w, &b).expect("valid").0.dot(&v), &x, step)?;
            let numeric_w = numerical_gradient_slice(
                |p| {
                    let w = Matrix::from_vec(12, 5, p.to_vec()).expect("shape");
                    fc_head_forward(&x, &w, &b).expect("valid").0.dot(&v)
                },
                w.data(),
                step,
            )?;
            let numeric_b =
                numerical_gradient_slice(|p| fc_head_forward(&x, &w, p).expect("valid").0.dot(&v), &b, step)?;
            Ok(vec![
                compare(&name("input"), &g.d_input, &numeric_x, tolerance, step)?,
                compare_slices(&name("weights"), g.param("weights").unwrap_or_default(), &numeric_w, tolerance, step)?,
                compare_slices(&name("bias"), g.param("bias").unwrap_or_default(), &numeric_b, tolerance, step)?,
            ])
        }
        "pointwise" => {
            let x = FeatureMap::randn_seeded((2, 3, 3, 3), s(0), 1.0)?;
            let w = Matrix::randn_seeded(3, 4, s(1), 1.0)?;
            let v = FeatureMap::randn_seeded((2, 4, 3, 3), s(2), 1.0)?;
            let (_, cache) = pointwise_conv_forward(&x, &w)?;
            let g = pointwise_conv_backward(&v, &cache)?;
            let numeric_x = numerical_gradient(|p| pointwise_conv_forward(p, &w).expect("valid").0.dot(&v), &x, step)?;
            let numeric_w = numerical_gradient_slice(
                |p| {
                    let w = Matrix::from_vec(3, 4, p.to_vec()).expect("shape");
                    pointwise_conv_forward(&x, &w).expect("valid").0.dot(&v)
                },
                w.data(),
                step,
            )?;
            Ok(vec![
                compare(&name("input"), &g.d_input, &numeric_x, tolerance, step)?,
                compare_slices(&name("weights"), g.param("weights").unwrap_or_default(), &numeric_w, tolerance, step)?,
            ])
        }
        "gnap" => {
            let x = FeatureMap::randn_seeded(GNAP_SHAPE, s(0), 1.0)?;
            let v = Matrix::randn_seeded(GNAP_SHAPE.n, 3, s(1), 1.0)?;
            let mut state = GnapState::new(3).with_mode(Mode::Train);
            state.entry.beta = seeded_vec(3, s(2), 0.5);
            state.exit.beta = seeded_vec(3, s(3), 0.5);
            let embed = |x: &FeatureMap, state: &GnapState| gnap_forward(x, &mut state.clone()).expect("valid").0.dot(&v);
            let (_, cache) = gnap_forward(&x, &mut state.clone())?;
            let g = gnap_backward(&v, &cache)?;
            let numeric_x = numerical_gradient(|p| embed(p, &state), &x, step)?;
            let numeric_in = numerical_gradient_slice(
                |beta| {
                    let mut probe = state.clone();
                    probe.entry.beta = beta.to_vec();
                    embed(&x, &probe)
                },
                &state.entry.beta,
                step,
            )?;
            let numeric_out = numerical_gradient_slice(
                |beta| {
                    let mut probe = state.clone();
                    probe.exit.beta = beta.to_vec();
                    embed(&x, &probe)
                },
                &state.exit.beta,
                step,
            )?;
            Ok(vec![
                compare(&name("input"), &g.d_input, &numeric_x, tolerance, step)?,
                compare_slices(&name("beta_in"), g.param("beta_in").unwrap_or_default(), &numeric_in, tolerance, step)?,
                compare_slices(&name("beta_out"), g.param("beta_out").unwrap_or_default(), &numeric_out, tolerance, step)?,
            ])
        }
        "angular-loss" => {
            let (n, d, k) = (6, 4, 5);
            let e = Matrix::randn_seeded(n, d, s(0), 1.0)?;
            let w = Matrix::randn_seeded(d, k, s(1), 1.0)?;
            let mut rng = NormalStream::new(s(2));
            let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            let (margin, scale) = (0.3, 8.0);
            let out = angular_margin_loss(&e, &w, &labels, margin, scale)?;
            let numeric_e = numerical_gradient_slice(
                |p| {
                    let e = Matrix::from_vec(n, d, p.to_vec()).expect("shape");
                    angular_margin_loss(&e, &w, &labels, margin, scale).expect("valid").loss
                },
                e.data(),
                step,
            )?;
            let numeric_w = numerical_gradient_slice(
                |p| {
                    let w = Matrix::from_vec(d, k, p.to_vec()).expect("shape");
                    angular_margin_loss(&e, &w, &labels, margin, scale).expect("valid").loss
                },
                w.data(),
                step,
            )?;
            Ok(vec![
                compare_slices(&name("embeddings"), out.d_embeddings.data(), &numeric_e, tolerance, step)?,
                compare_slices(&name("class_weights"), out.d_class_weights.data(), &numeric_w, tolerance, step)?,
            ])
        }
        other => Err(Error::parameter(format!(
            "unknown layer `{other}`; expected one of {} or all",
            LAYERS.join(", ")
        ))),
    }
}

/// Certifies `layers` over `instances` consecutive seeds starting at `seed`.
pub fn certify_all(layers: &[&str], seed: u64, instances: u64, tolerance: f64, step: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for layer in layers {
        for k in 0..instances {
            reports.extend(certify(layer, seed + k, tolerance, step)?);
        }
    }
    Ok(reports)
}

/// Projection of the input gradient used by the Euler-identity check:
/// `dot(x, J^T v)` for the reweighting layer.
pub fn reweight_euler_residual(x: &FeatureMap, v: &FeatureMap) -> Result<(f64, f64)> {
    let (out, cache) = reweight(x, DEFAULT_EPS_NORM)?;
    let d = reweight_backward(v, &cache)?;
    Ok((dot(x.data(), d.d_input.data()), out.dot(v)))
}
