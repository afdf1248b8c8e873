//! Dense f64 tensors and the reverse-mode differentiation tape.
//!
//! Values are plain row-major buffers; 4-D data uses NCHW layout. All
//! differentiable work happens through [`Tape`], which records executed
//! operations and replays them in reverse for gradients.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_sampled, nudge_away_from_kinks};
pub use tape::{ScanDirection, Tape, TensorId};

use crate::error::{Error, Result};

/// A dense tensor value: shape plus row-major f64 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if data.len() != numel {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// 4-D NCHW constructor.
    pub fn nchw(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![n, c, h, w], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extents as (n, c, h, w); errors unless the tensor is 4-D.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, c, h, w] => Ok((n, c, h, w)),
            other => Err(Error::shape(format!("expected 4-D tensor, got {other:?}"))),
        }
    }
}

/// Flat index helpers for 4-D row-major layout.
#[inline]
pub(crate) fn idx4(c: usize, h: usize, w: usize, ci: usize, hi: usize, wi: usize, ni: usize) -> usize {
    ((ni * c + ci) * h + hi) * w + wi
}
