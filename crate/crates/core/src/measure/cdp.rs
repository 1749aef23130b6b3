use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rand::seq::index;
use rand::Rng as _;
use rustfft::{Fft, FftPlanner};

use super::{MeasurementOperator, MeasurementVector, SignalVector};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Coded diffraction pattern: `y = S F (d .* x)` with `d` a uniform random
/// phase mask, `F` the unitary 2D DFT and `S` a uniform random selection of
/// `m` frequencies.
#[derive(Clone)]
pub struct CodedDiffractionOperator<T: Scalar> {
    shape: (usize, usize),
    seed: u64,
    phase_mask: Vec<Complex<T>>,
    /// Strictly increasing.
    indices: Vec<usize>,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
    scale: T,
}

impl<T: Scalar> fmt::Debug for CodedDiffractionOperator<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CodedDiffractionOperator")
            .field("shape", &self.shape)
            .field("m", &self.indices.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl<T: Scalar> CodedDiffractionOperator<T> {
    pub fn new(shape: (usize, usize), m: usize, seed: u64) -> Result<Self> {
        let (h, w) = shape;
        let n = h * w;
        if n == 0 {
            return Err(Error::Argument("coded diffraction needs a non-empty image".into()));
        }
        if m == 0 || m > n {
            return Err(Error::Argument(format!("coded diffraction needs 0 < m <= n (m={m}, n={n})")));
        }
        let mut r = rng::stream(seed, "cdp-phase");
        let phase_mask = (0..n)
            .map(|_| {
                let theta: f64 = r.random_range(0.0..std::f64::consts::TAU);
                Complex::new(T::of(theta.cos()), T::of(theta.sin()))
            })
            .collect();
        let mut r = rng::stream(seed, "cdp-subsample");
        let mut indices = index::sample(&mut r, n, m).into_vec();
        indices.sort_unstable();

        let mut planner = FftPlanner::new();
        Ok(Self {
            shape,
            seed,
            phase_mask,
            indices,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
            scale: T::one() / T::of((n as f64).sqrt()),
        })
    }

    /// Replaces the random phase mask; every entry must have unit modulus.
    pub fn with_phase_mask(mut self, mask: Vec<Complex<T>>) -> Result<Self> {
        if mask.len() != self.phase_mask.len() {
            return Err(Error::dim("phase mask length differs from n"));
        }
        if mask.iter().any(|c| (c.norm().f64() - 1.0).abs() > 1e-6) {
            return Err(Error::Argument("phase mask entries must have unit modulus".into()));
        }
        self.phase_mask = mask;
        Ok(self)
    }

    pub fn phase_mask(&self) -> &[Complex<T>] {
        &self.phase_mask
    }

    pub fn sample_indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn fft2(&self, buf: &mut [Complex<T>], inverse: bool) {
        let (h, w) = self.shape;
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        row.process(buf);
        let mut t = vec![Complex::new(T::zero(), T::zero()); h * w];
        transpose(buf, &mut t, h, w);
        col.process(&mut t);
        transpose(&t, buf, w, h);
        buf.iter_mut().for_each(|v| *v = *v * self.scale);
    }

    /// Forward map on a complex signal.
    pub fn apply_complex(&self, x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if x.len() != self.n() {
            return Err(Error::dim(format!("signal length {} but operator expects {}", x.len(), self.n())));
        }
        let mut buf: Vec<Complex<T>> = x.iter().zip(&self.phase_mask).map(|(a, d)| *a * *d).collect();
        self.fft2(&mut buf, false);
        Ok(self.indices.iter().map(|&i| buf[i]).collect())
    }

    /// Full complex adjoint `A^H y`.
    pub fn adjoint_complex(&self, y: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if y.len() != self.m() {
            return Err(Error::dim(format!("measurement length {} but operator produces {}", y.len(), self.m())));
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n()];
        for (&i, v) in self.indices.iter().zip(y) {
            buf[i] = *v;
        }
        self.fft2(&mut buf, true);
        Ok(buf.iter().zip(&self.phase_mask).map(|(a, d)| *a * d.conj()).collect())
    }
}

fn transpose<T: Copy>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

impl<T: Scalar> MeasurementOperator<T> for CodedDiffractionOperator<T> {
    fn m(&self) -> usize {
        self.indices.len()
    }
    fn n(&self) -> usize {
        self.shape.0 * self.shape.1
    }
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn apply(&self, x: &SignalVector<T>) -> Result<MeasurementVector<T>> {
        self.check_signal(x)?;
        let xc: Vec<Complex<T>> = x.values().iter().map(|v| Complex::new(*v, T::zero())).collect();
        Ok(MeasurementVector::Complex(self.apply_complex(&xc)?))
    }

    fn apply_adjoint(&self, y: &MeasurementVector<T>) -> Result<SignalVector<T>> {
        self.check_measurement(y)?;
        let MeasurementVector::Complex(yv) = y else {
            return Err(Error::dim("coded diffraction operator expects complex measurements"));
        };
        let full = self.adjoint_complex(yv)?;
        SignalVector::new(self.shape.0, self.shape.1, full.iter().map(|c| c.re).collect())
    }

    fn zero_measurement(&self) -> MeasurementVector<T> {
        MeasurementVector::Complex(vec![Complex::new(T::zero(), T::zero()); self.m()])
    }
}
