//! Dense 4-D tensors, differentiable primitives, and the autodiff tape.

mod gradcheck;
mod kernels;
mod tape;
#[cfg(test)]
mod tests_ops;

pub use gradcheck::{check_gradient, GradCheckReport, DEFAULT_EPSILON};
pub use tape::{Gradients, Tape, ValueId};

/// Per-channel mean and biased variance over (n, h, w).
pub fn batch_moments(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    kernels::batch_moments(t.data(), t.shape())
}

use std::fmt;

use crate::error::{Error, Result};

/// Extents of a 4-D tensor: batch, channels, rows, columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Row-major flat index.
    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array of f32 in row-major (n, c, h, w) order.
///
/// Tensors are immutable values once built; gradients live on the [`Tape`],
/// keyed by the value that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must all be >= 1, got {shape}"
            )));
        }
        if data.len() != shape.count() {
            return Err(Error::shape(
                "tensor data length",
                format!("{} ({shape})", shape.count()),
                data.len().to_string(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.count()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.count());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.shape.at(n, c, y, x)]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    /// Scalar value of a 1x1x1x1 tensor.
    pub fn scalar(&self) -> Result<f32> {
        if self.shape.count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "expected scalar tensor, got {}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}
