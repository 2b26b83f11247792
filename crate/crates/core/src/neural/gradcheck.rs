//! Central finite-difference gradient checking.

use super::params::Parameters;

pub const DEFAULT_STEP: f64 = 1e-6;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(1e-8, analytic.abs() + numeric.abs())
}

/// Central-difference gradient of `loss` at `model`, flattened.
pub fn numeric_gradient<P, F>(model: &P, loss: F, step: f64) -> Vec<f64>
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let base = model.flatten();
    let mut probe = model.clone();
    let mut values = base.clone();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        values[i] = base[i] + step;
        probe.assign_flat(&values).expect("same layout");
        let plus = loss(&probe);
        values[i] = base[i] - step;
        probe.assign_flat(&values).expect("same layout");
        let minus = loss(&probe);
        values[i] = base[i];
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// `‖a - n‖ / max(1e-8, ‖a‖ + ‖n‖)` over whole gradient vectors.
pub fn vector_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    diff / f64::max(1e-8, norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied()))
}

/// Compares `analytic` (same layout as `model`) against central differences
/// of `loss` and returns the maximum relative error over all parameters.
pub fn grad_check<P, F>(model: &P, analytic: &P, loss: F, step: f64) -> f64
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let base = model.flatten();
    let grads = analytic.flatten();
    assert_eq!(base.len(), grads.len(), "gradient layout differs from model");
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let mut values = base.clone();
    for i in 0..base.len() {
        values[i] = base[i] + step;
        probe.assign_flat(&values).expect("same layout");
        let plus = loss(&probe);
        values[i] = base[i] - step;
        probe.assign_flat(&values).expect("same layout");
        let minus = loss(&probe);
        values[i] = base[i];
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(grads[i], numeric));
    }
    worst
}
