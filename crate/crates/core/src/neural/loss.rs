use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the single unit entry of a one-hot vector.
pub fn one_hot_index(target: &[f64]) -> Result<usize> {
    let mut idx = None;
    for (i, &v) in target.iter().enumerate() {
        if v == 1.0 {
            if idx.is_some() {
                return Err(Error::Domain("target has more than one unit entry".into()));
            }
            idx = Some(i);
        } else if v != 0.0 {
            return Err(Error::Domain(format!("target entry {v} is neither 0 nor 1")));
        }
    }
    idx.ok_or_else(|| Error::Domain("target has no unit entry".into()))
}

pub fn one_hot(index: usize, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[index] = 1.0;
    v
}

/// Returns `(-log p_target, p - target)` for a one-hot target.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "logits width {} vs target width {}",
            logits.len(),
            target.len()
        )));
    }
    let k = one_hot_index(target)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[k];
    let p = softmax(logits);
    let grad = p.iter().zip(target).map(|(p, t)| p - t).collect();
    Ok((loss, grad))
}

/// Squared error `(pred - target)^2` and its gradient `2 (pred - target)`.
pub fn squared_error(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (d * d, 2.0 * d)
}

/// Pulls a loss gradient w.r.t. softmax outputs back to the logits:
/// `dz_j = p_j (g_j - sum_k p_k g_k)`.
pub fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(d_probs).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(d_probs)
        .map(|(p, g)| p * (g - inner))
        .collect()
}
