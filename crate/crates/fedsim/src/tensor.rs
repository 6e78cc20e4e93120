//! Dense row-major tensors of 64-bit reals.
//!
//! Everything model-shaped in the simulator (inputs, activations, weights,
//! importance scores, triggers, masks) is one of these. The layout contract is
//! row-major with the last axis fastest, which is also the order `data()`
//! exposes and the checkpoint format serializes.

use crate::error::{Error, Result};

/// A dense tensor: a shape and a row-major data buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major values.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: vec![expected],
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Tensor filled with a constant.
    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, "Tensor::zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        self.check_same_shape(other, "Tensor::add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Squared Euclidean norm of the whole buffer.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    fn check_same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Nearest-neighbor resample of a 2-D map to `(target_h, target_w)`.
///
/// Output index `i` reads source index `floor(i * src / target)`, matching the
/// usual integer nearest-neighbor convention. Sign patterns survive exactly,
/// which is what the flip operations need.
pub fn resize_nearest_2d(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    target_h: usize,
    target_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), src_h * src_w, "resize_nearest_2d: bad src length");
    let mut out = Vec::with_capacity(target_h * target_w);
    for y in 0..target_h {
        let sy = y * src_h / target_h;
        for x in 0..target_w {
            let sx = x * src_w / target_w;
            out.push(src[sy * src_w + sx]);
        }
    }
    out
}

/// Nearest-neighbor resample of a 1-D sequence to `target_len`.
pub fn resize_nearest_1d(src: &[f64], target_len: usize) -> Vec<f64> {
    assert!(!src.is_empty(), "resize_nearest_1d: empty source");
    (0..target_len).map(|i| src[i * src.len() / target_len]).collect()
}
