//! Dense NHWC tensors with just enough reverse-mode differentiation for
//! residual convolutional denoisers: 3x3 same-padded convolution, batch
//! normalization, ReLU and elementwise add/sub, plus Adam.

mod adam;
mod batchnorm;
mod conv;
mod layer;
mod tape;

pub use adam::{AdamConfig, AdamState, PlateauSchedule};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnMode, BnSaved};
pub use conv::{conv2d_backward, conv2d_forward};
pub use layer::{BatchNorm, LayerGrads, LayerParams, RunningStats, BN_EPS, BN_MOMENTUM};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Four-dimensional array laid out as (batch, height, width, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    data: Vec<T>,
    shape: [usize; 4],
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(Error::dim(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self { data: vec![T::zero(); shape.iter().product()], shape }
    }

    pub fn filled(shape: [usize; 4], v: T) -> Self {
        Self { data: vec![v; shape.iter().product()], shape }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let [b, h, w, c] = shape;
        let mut data = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    for ci in 0..c {
                        data.push(f([bi, y, x, ci]));
                    }
                }
            }
        }
        Self { data, shape }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn height(&self) -> usize {
        self.shape[1]
    }
    pub fn width(&self) -> usize {
        self.shape[2]
    }
    pub fn channels(&self) -> usize {
        self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, [b, y, x, c]: [usize; 4]) -> usize {
        ((b * self.shape[1] + y) * self.shape[2] + x) * self.shape[3] + c
    }

    pub fn at(&self, idx: [usize; 4]) -> T {
        self.data[self.index(idx)]
    }

    /// Elements of one batch entry.
    pub fn sample(&self, b: usize) -> &[T] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[b * per..(b + 1) * per]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[b * per..(b + 1) * per]
    }

    /// Copies out the batch entries listed in `idx`.
    pub fn gather(&self, idx: &[usize]) -> Self {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.sample(i));
        }
        Self { data, shape: [idx.len(), self.shape[1], self.shape[2], self.shape[3]] }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), shape: self.shape }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            shape: self.shape,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { data: self.data.iter().map(|v| U::of(v.f64())).collect(), shape: self.shape }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_same(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(format!("shape {:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }
}

/// Elementwise `max(0, x)`.
pub fn relu_forward<T: Scalar>(input: &Tensor4<T>) -> Tensor4<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU: passes `grad` where the pre-activation was positive.
pub fn relu_backward<T: Scalar>(input: &Tensor4<T>, grad: &Tensor4<T>) -> Result<Tensor4<T>> {
    input.zip_map(grad, |x, g| if x > T::zero() { g } else { T::zero() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_cases() {
        let t = Tensor4::new([1, 1, 3, 1], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&t).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor4::filled([2, 2, 2, 1], -3.0f32);
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor4::filled([2, 2, 2, 1], 0.5f32);
        assert_eq!(relu_forward(&pos), pos);
    }

    #[test]
    fn relu_blocks_gradient_at_negative_preactivation() {
        let x = Tensor4::new([1, 1, 2, 1], vec![-0.5f64, 0.5]).unwrap();
        let g = Tensor4::filled([1, 1, 2, 1], 1.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor4::<f32>::new([1, 2, 2, 1], vec![0.0; 3]).is_err());
    }
}
