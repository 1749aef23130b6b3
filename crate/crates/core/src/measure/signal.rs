use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Flattened real image in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVector<T> {
    values: Vec<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> SignalVector<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "{} values for a {}x{} signal",
                values.len(),
                height,
                width
            )));
        }
        Ok(Self { values, height, width })
    }

    /// Column signal of length `values.len()`.
    pub fn from_vec(values: Vec<T>) -> Self {
        let n = values.len();
        Self { values, height: n, width: 1 }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { values: vec![T::zero(); height * width], height, width }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn values(&self) -> &[T] {
        &self.values
    }
    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }
    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn reshape(self, height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(format!("signal lengths {} and {}", self.len(), other.len())));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        Ok(self.with_values(self.values.iter().zip(&other.values).map(|(a, b)| *a + *b).collect()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check(other)?;
        Ok(self.with_values(self.values.iter().zip(&other.values).map(|(a, b)| *a - *b).collect()))
    }

    pub fn scale(&self, s: T) -> Self {
        self.with_values(self.values.iter().map(|v| *v * s).collect())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        self.check(other)?;
        Ok(self.with_values(
            self.values.iter().zip(&other.values).map(|(x, y)| a * *x + b * *y).collect(),
        ))
    }

    pub fn with_values(&self, values: Vec<T>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { values, height: self.height, width: self.width }
    }

    pub fn norm_sq(&self) -> f64 {
        scalar::sum_sq(&self.values)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        scalar::dot(&self.values, &other.values)
    }

    /// `(1/n) ||self - other||^2`.
    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.check(other)?;
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum();
        Ok(s / self.len() as f64)
    }

    pub fn cast<U: Scalar>(&self) -> SignalVector<U> {
        SignalVector {
            values: self.values.iter().map(|v| U::of(v.f64())).collect(),
            height: self.height,
            width: self.width,
        }
    }
}

/// Measurements: real for Gaussian operators, complex for coded diffraction.
#[derive(Debug, Clone, PartialEq)]
pub enum MeasurementVector<T> {
    Real(Vec<T>),
    Complex(Vec<Complex<T>>),
}

impl<T: Scalar> MeasurementVector<T> {
    pub fn len(&self) -> usize {
        match self {
            Self::Real(v) => v.len(),
            Self::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Self::Real(v) => Self::Real(vec![T::zero(); v.len()]),
            Self::Complex(v) => Self::Complex(vec![Complex::new(T::zero(), T::zero()); v.len()]),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Self::Real(v) => v.iter().all(|x| x.is_finite()),
            Self::Complex(v) => v.iter().all(|x| x.re.is_finite() && x.im.is_finite()),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match self {
            Self::Real(v) => scalar::sum_sq(v),
            Self::Complex(v) => v.iter().map(|c| c.re.f64().powi(2) + c.im.f64().powi(2)).sum(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        match self {
            Self::Real(v) => Self::Real(v.iter().map(|x| *x * s).collect()),
            Self::Complex(v) => Self::Complex(v.iter().map(|x| *x * s).collect()),
        }
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: T, other: &Self, b: T) -> Result<Self> {
        match (self, other) {
            (Self::Real(x), Self::Real(y)) if x.len() == y.len() => {
                Ok(Self::Real(x.iter().zip(y).map(|(p, q)| a * *p + b * *q).collect()))
            }
            (Self::Complex(x), Self::Complex(y)) if x.len() == y.len() => {
                Ok(Self::Complex(x.iter().zip(y).map(|(p, q)| *p * a + *q * b).collect()))
            }
            _ => Err(Error::dim(format!(
                "incompatible measurement vectors (lengths {} and {})",
                self.len(),
                other.len()
            ))),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.lincomb(T::one(), other, T::one())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.lincomb(T::one(), other, -T::one())
    }

    /// Complex inner product `sum conj(self_i) other_i` as (re, im).
    pub fn inner(&self, other: &Self) -> Result<(f64, f64)> {
        match (self, other) {
            (Self::Real(x), Self::Real(y)) if x.len() == y.len() => Ok((scalar::dot(x, y), 0.0)),
            (Self::Complex(x), Self::Complex(y)) if x.len() == y.len() => {
                Ok(x.iter().zip(y).fold((0.0, 0.0), |(re, im), (p, q)| {
                    let (pr, pi, qr, qi) = (p.re.f64(), p.im.f64(), q.re.f64(), q.im.f64());
                    (re + pr * qr + pi * qi, im + pr * qi - pi * qr)
                }))
            }
            _ => Err(Error::dim("incompatible measurement vectors")),
        }
    }
}
