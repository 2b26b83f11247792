use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            };
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            )));
        }
        Ok(())
    }
}

/// `out = W x + b` for a `rows x cols` matrix.
pub(crate) fn affine(w: &Tensor, b: &Tensor, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.cols(), x.len());
    let cols = w.cols();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w.data[r * cols..(r + 1) * cols];
        *o = b.data[r] + dot(row, x);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dW += dy x^T`, `db += dy`, `dx += W^T dy`.
pub(crate) fn affine_backward(
    w: &Tensor,
    x: &[f64],
    dy: &[f64],
    dw: &mut Tensor,
    db: &mut Tensor,
    dx: &mut [f64],
) {
    let cols = w.cols();
    for (r, &g) in dy.iter().enumerate() {
        db.data[r] += g;
        if g == 0.0 {
            continue;
        }
        let drow = &mut dw.data[r * cols..(r + 1) * cols];
        for (d, &xi) in drow.iter_mut().zip(x) {
            *d += g * xi;
        }
        let row = &w.data[r * cols..(r + 1) * cols];
        for (d, &wi) in dx.iter_mut().zip(row) {
            *d += g * wi;
        }
    }
}
