use crate::error::{Error, Result};

use super::tensor::Tensor;

/// A fixed, ordered set of named parameter tensors.
///
/// `tensors` and `tensors_mut` must enumerate the same tensors in the same
/// order. Gradients are represented by a value of the same type.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, model needs {expected}",
                values.len()
            )));
        }
        let mut cursor = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&values[cursor..cursor + n]);
            cursor += n;
        }
        Ok(())
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += other` elementwise.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let src: Vec<Vec<f64>> = other
            .tensors()
            .into_iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let dst = self.tensors_mut();
        if dst.len() != src.len() {
            return Err(Error::Shape("parameter sets differ in tensor count".into()));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.len() != s.len() {
                return Err(Error::Shape("parameter sets differ in tensor size".into()));
            }
            d.data_mut().iter_mut().zip(s).for_each(|(a, b)| *a += b);
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Tensor)>,
) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}
