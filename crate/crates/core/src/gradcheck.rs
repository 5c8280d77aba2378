//! Central-difference gradient oracle.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::FeatureMap;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Floor of the relative-error denominator, so near-zero gradients are
/// compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub layer_name: String,
    pub max_rel_error: f64,
    pub worst_coordinate: Vec<usize>,
    pub step: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `out[k] = (f(x + step e_k) - f(x - step e_k)) / (2 step)` over a flat
/// parameter vector. Coordinates are evaluated independently (in parallel
/// with the `parallel` feature), each on its own perturbed copy.
///
/// The divisor is the realized difference `(x + step) - (x - step)` of the
/// two probe coordinates, which equals `2 step` up to the rounding of `x +/- step`.
pub fn numerical_gradient_slice<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::parameter(format!("step must be positive, got {step}")));
    }
    let grads: Vec<Result<f64>> = exec::map_indices(x.len(), |k| {
        let mut probe = x.to_vec();
        let (hi, lo) = (x[k] + step, x[k] - step);
        probe[k] = hi;
        let plus = f(&probe);
        probe[k] = lo;
        let minus = f(&probe);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "non-finite function value at coordinate {k}"
            )));
        }
        Ok((plus - minus) / (hi - lo))
    });
    grads.into_iter().collect()
}

pub fn numerical_gradient<F>(f: F, x: &FeatureMap, step: f64) -> Result<FeatureMap>
where
    F: Fn(&FeatureMap) -> f64 + Sync + Send,
{
    let shape = x.shape();
    let g = numerical_gradient_slice(
        |v| {
            let probe = FeatureMap::from_vec(shape, v.to_vec()).expect("shape preserved");
            f(&probe)
        },
        x.data(),
        step,
    )?;
    FeatureMap::from_vec(shape, g)
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` with its flat index. Ties keep
/// the lowest index.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> Result<(f64, usize)> {
    if analytic.len() != numeric.len() {
        return Err(Error::contract(format!(
            "analytic gradient has {} values, numeric has {}",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut worst = (0.0, 0);
    for (k, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(REL_ERROR_FLOOR);
        let err = (a - n).abs() / denom;
        if err > worst.0 || err.is_nan() {
            worst = (if err.is_nan() { f64::INFINITY } else { err }, k);
        }
    }
    Ok(worst)
}

pub fn compare(
    layer_name: &str,
    analytic: &FeatureMap,
    numeric: &FeatureMap,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::contract("analytic and numeric gradients differ in shape"));
    }
    let (err, flat) = max_rel_error(analytic.data(), numeric.data())?;
    Ok(GradCheckReport {
        layer_name: layer_name.to_string(),
        max_rel_error: err,
        worst_coordinate: analytic.unravel(flat).to_vec(),
        step,
        tolerance,
        passed: err < tolerance,
    })
}

/// [`compare`] for flat parameter vectors; the worst coordinate is the flat index.
pub fn compare_slices(
    layer_name: &str,
    analytic: &[f64],
    numeric: &[f64],
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    let (err, flat) = max_rel_error(analytic, numeric)?;
    Ok(GradCheckReport {
        layer_name: layer_name.to_string(),
        max_rel_error: err,
        worst_coordinate: vec![flat],
        step,
        tolerance,
        passed: err < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_has_unit_gradient() {
        let x = FeatureMap::randn_seeded((1, 2, 2, 2), 0, 0.1).unwrap();
        let g = numerical_gradient(|v| v.data().iter().sum(), &x, DEFAULT_STEP).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn quadratic_recovers_input() {
        let x = FeatureMap::randn_seeded((1, 3, 2, 2), 1, 1.0).unwrap();
        let g = numerical_gradient(|v| 0.5 * v.dot(v), &x, DEFAULT_STEP).unwrap();
        let (err, _) = max_rel_error(g.data(), x.data()).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn degree_two_polynomials_are_exact() {
        // f = sum_k (a_k x_k^2 + b_k x_k) + x_0 x_1
        let x: Vec<f64> = vec![0.3, -1.2, 2.5, 0.7];
        let a = [1.5, -0.5, 2.0, 0.25];
        let b = [0.1, 3.0, -1.0, 0.0];
        let f = |v: &[f64]| {
            v.iter().zip(a).zip(b).map(|((x, a), b)| a * x * x + b * x).sum::<f64>() + v[0] * v[1]
        };
        let mut exact: Vec<f64> = x.iter().zip(a).zip(b).map(|((x, a), b)| 2.0 * a * x + b).collect();
        exact[0] += x[1];
        exact[1] += x[0];
        for step in [1e-2, 1e-4] {
            let g = numerical_gradient_slice(f, &x, step).unwrap();
            let (err, _) = max_rel_error(&g, &exact).unwrap();
            assert!(err < 1e-9, "step {step}: {err}");
        }
    }

    #[test]
    fn identical_tensors_pass() {
        let x = FeatureMap::randn_seeded((1, 2, 2, 2), 2, 1.0).unwrap();
        let r = compare("id", &x, &x, 1e-12, DEFAULT_STEP).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
        assert_eq!(r.worst_coordinate, vec![0, 0, 0, 0]);
    }

    #[test]
    fn reports_the_perturbed_coordinate() {
        let x = FeatureMap::zeros((1, 2, 2, 2)).unwrap().map(|_| 1.0);
        let mut y = x.clone();
        let k = x.index(0, 1, 1, 0);
        y.data_mut()[k] = 1.1;
        let r = compare("off", &x, &y, 1e-5, DEFAULT_STEP).unwrap();
        assert_eq!(r.worst_coordinate, vec![0, 1, 1, 0]);
        assert!((r.max_rel_error - 0.1 / 1.1).abs() < 1e-12);
        assert!(!r.passed);
    }

    #[test]
    fn shape_mismatch_and_bad_inputs() {
        let a = FeatureMap::zeros((1, 1, 1, 2)).unwrap();
        let b = FeatureMap::zeros((1, 1, 2, 1)).unwrap();
        assert!(matches!(compare("x", &a, &b, 1e-5, 1e-6), Err(Error::Contract(_))));
        assert!(numerical_gradient(|_| 0.0, &a, 0.0).is_err());
        let r = numerical_gradient(|v| 1.0 / v.data()[0], &a, 1e-6);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
