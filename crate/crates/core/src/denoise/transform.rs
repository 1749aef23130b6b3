//! Orthonormal 2D DCT-II and separable Gaussian blur.

use crate::scalar::Scalar;

/// Orthonormal DCT-II matrix of size `n x n`, row `k` is basis vector `k`.
fn dct_matrix<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = vec![T::zero(); n * n];
    let nf = n as f64;
    for k in 0..n {
        let a = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            let v = a * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / nf).cos();
            m[k * n + i] = T::of(v);
        }
    }
    m
}

/// Separable orthonormal 2D DCT on an `h x w` row-major image.
pub struct Dct2<T> {
    h: usize,
    w: usize,
    ch: Vec<T>,
    cw: Vec<T>,
}

impl<T: Scalar> Dct2<T> {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, ch: dct_matrix(h), cw: dct_matrix(w) }
    }

    /// `C_h X C_w^T`
    pub fn forward(&self, x: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![T::zero(); h * w];
        T::gemm(h, h, w, &self.ch, (h, 1), x, (w, 1), T::zero(), &mut tmp, (w, 1));
        let mut out = vec![T::zero(); h * w];
        T::gemm(h, w, w, &tmp, (w, 1), &self.cw, (1, w), T::zero(), &mut out, (w, 1));
        out
    }

    /// `C_h^T X C_w`
    pub fn inverse(&self, x: &[T]) -> Vec<T> {
        let (h, w) = (self.h, self.w);
        let mut tmp = vec![T::zero(); h * w];
        T::gemm(h, h, w, &self.ch, (1, h), x, (w, 1), T::zero(), &mut tmp, (w, 1));
        let mut out = vec![T::zero(); h * w];
        T::gemm(h, w, w, &tmp, (w, 1), &self.cw, (w, 1), T::zero(), &mut out, (w, 1));
        out
    }
}

/// Gaussian blur with standard deviation `radius` pixels, clamped borders.
pub fn gaussian_blur<T: Scalar>(x: &[T], h: usize, w: usize, radius: f64) -> Vec<T> {
    if radius <= 0.0 {
        return x.to_vec();
    }
    let half = (3.0 * radius).ceil() as isize;
    let taps: Vec<f64> = (-half..=half).map(|d| (-(d * d) as f64 / (2.0 * radius * radius)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let mut rows = vec![T::zero(); h * w];
    for y in 0..h {
        for xx in 0..w {
            let s: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * x[y * w + clamp(xx as isize + k as isize - half, w)].f64())
                .sum();
            rows[y * w + xx] = T::of(s);
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for xx in 0..w {
            let s: f64 = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[clamp(y as isize + k as isize - half, h) * w + xx].f64())
                .sum();
            out[y * w + xx] = T::of(s);
        }
    }
    out
}
