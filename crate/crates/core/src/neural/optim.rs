use crate::error::{Error, Result};

use super::params::Parameters;

/// Plain SGD: `p <- p - lr * g`.
pub fn sgd_step<P: Parameters>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    let g: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let targets = params.tensors_mut();
    if targets.len() != g.len() {
        return Err(Error::Shape(format!(
            "sgd: {} parameter tensors vs {} gradient tensors",
            targets.len(),
            g.len()
        )));
    }
    for (p, (name, gv)) in targets.into_iter().zip(g) {
        if p.len() != gv.len() {
            return Err(Error::Shape(format!(
                "sgd: gradient '{name}' has {} values, parameter has {}",
                gv.len(),
                p.len()
            )));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(gv) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`. Returns the
/// norm before clipping. A non-positive `max_norm` disables clipping.
pub fn clip_global_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.squared_norm().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::mlp::Dense;
    use crate::neural::tensor::Tensor;

    fn dense(w: f64, b: f64) -> Dense {
        Dense {
            weight: Tensor::from_vec(&[1, 1], vec![w]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![b]).unwrap(),
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = dense(0.3, -0.2);
        let before = p.clone();
        sgd_step(&mut p, &dense(0.0, 0.0), 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_value() {
        let mut p = dense(1.0, 1.0);
        sgd_step(&mut p, &dense(0.5, 0.5), 0.001).unwrap();
        assert_eq!(p.weight.data()[0], 0.9995);
    }

    #[test]
    fn two_steps_equal_one_double_step() {
        let mut a = dense(0.25, 0.5);
        let mut b = a.clone();
        sgd_step(&mut a, &dense(0.5, 0.25), 0.125).unwrap();
        sgd_step(&mut a, &dense(0.5, 0.25), 0.125).unwrap();
        sgd_step(&mut b, &dense(1.0, 0.5), 0.125).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = dense(1.0, 1.0);
        let g = Dense::zeros(2, 1);
        assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn clipping_rescales_to_max_norm() {
        let mut g = dense(3.0, 4.0);
        let norm = clip_global_norm(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g.squared_norm().sqrt() - 1.0).abs() < 1e-15);
        let mut small = dense(0.3, 0.4);
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, dense(0.3, 0.4));
    }
}
