use super::{MeasurementOperator, MeasurementVector, SignalVector};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Dense `m x n` matrix with i.i.d. N(0, 1/m) entries, so columns have unit
/// expected squared norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOperator<T> {
    m: usize,
    n: usize,
    shape: (usize, usize),
    seed: Option<u64>,
    /// Row-major.
    matrix: Vec<T>,
}

impl<T: Scalar> GaussianOperator<T> {
    pub fn new(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::Argument(format!("gaussian operator needs m, n > 0 (got {m}x{n})")));
        }
        let mut r = rng::stream(seed, "gaussian-matrix");
        let std = 1.0 / (m as f64).sqrt();
        let matrix = (0..m * n).map(|_| T::of(std * rng::normal::<f64>(&mut r))).collect();
        Ok(Self { m, n, shape: (n, 1), seed: Some(seed), matrix })
    }

    /// Wraps an explicit row-major matrix.
    pub fn from_matrix(m: usize, n: usize, matrix: Vec<T>) -> Result<Self> {
        if m == 0 || n == 0 || matrix.len() != m * n {
            return Err(Error::dim(format!("{} entries for a {m}x{n} matrix", matrix.len())));
        }
        Ok(Self { m, n, shape: (n, 1), seed: None, matrix })
    }

    pub fn with_shape(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.n {
            return Err(Error::dim(format!("{height}x{width} image does not have {} pixels", self.n)));
        }
        self.shape = (height, width);
        Ok(self)
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn matrix(&self) -> &[T] {
        &self.matrix
    }

    pub fn entry(&self, row: usize, col: usize) -> T {
        self.matrix[row * self.n + col]
    }
}

impl<T: Scalar> MeasurementOperator<T> for GaussianOperator<T> {
    fn m(&self) -> usize {
        self.m
    }
    fn n(&self) -> usize {
        self.n
    }
    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn apply(&self, x: &SignalVector<T>) -> Result<MeasurementVector<T>> {
        self.check_signal(x)?;
        let mut y = vec![T::zero(); self.m];
        T::gemm(self.m, self.n, 1, &self.matrix, (self.n, 1), x.values(), (1, 1), T::zero(), &mut y, (1, 1));
        Ok(MeasurementVector::Real(y))
    }

    fn apply_adjoint(&self, y: &MeasurementVector<T>) -> Result<SignalVector<T>> {
        self.check_measurement(y)?;
        let MeasurementVector::Real(yv) = y else {
            return Err(Error::dim("gaussian operator expects real measurements"));
        };
        let mut x = vec![T::zero(); self.n];
        T::gemm(self.n, self.m, 1, &self.matrix, (1, self.n), yv, (1, 1), T::zero(), &mut x, (1, 1));
        SignalVector::new(self.shape.0, self.shape.1, x)
    }

    fn zero_measurement(&self) -> MeasurementVector<T> {
        MeasurementVector::Real(vec![T::zero(); self.m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_dims_rejected() {
        assert!(matches!(GaussianOperator::<f64>::new(0, 4, 1), Err(Error::Argument(_))));
        assert!(matches!(GaussianOperator::<f64>::new(4, 0, 1), Err(Error::Argument(_))));
    }

    #[test]
    fn reproducible_from_seed() {
        let a = GaussianOperator::<f64>::new(2, 4, 7).unwrap();
        let b = GaussianOperator::<f64>::new(2, 4, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrix(), GaussianOperator::<f64>::new(2, 4, 8).unwrap().matrix());
    }

    #[test]
    fn entry_mean_within_four_standard_errors() {
        let (m, n) = (1000, 1000);
        let a = GaussianOperator::<f64>::new(m, n, 21).unwrap();
        let mean = a.matrix().iter().sum::<f64>() / (m * n) as f64;
        let se = (1.0 / m as f64).sqrt() / ((m * n) as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn columns_have_unit_norm_on_average() {
        let (m, n) = (512, 1024);
        let a = GaussianOperator::<f64>::new(m, n, 5).unwrap();
        let mut acc = 0.0;
        for c in 0..n {
            acc += (0..m).map(|r| a.entry(r, c).powi(2)).sum::<f64>();
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() < 0.2, "{mean}");
    }

    #[test]
    fn explicit_matrix_product() {
        let a = GaussianOperator::from_matrix(2, 2, vec![1.0f64, 0.0, 0.0, 2.0]).unwrap();
        let y = a.apply(&SignalVector::from_vec(vec![3.0, 4.0])).unwrap();
        assert_eq!(y, MeasurementVector::Real(vec![3.0, 8.0]));
    }

    #[test]
    fn adjoint_is_explicit_transpose() {
        let data: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let a = GaussianOperator::from_matrix(4, 8, data.clone()).unwrap();
        let y = vec![1.0, -2.0, 0.5, 3.0];
        let got = a.apply_adjoint(&MeasurementVector::Real(y.clone())).unwrap();
        for c in 0..8 {
            let expect: f64 = (0..4).map(|r| data[r * 8 + c] * y[r]).sum();
            assert_eq!(got.values()[c], expect);
        }
    }

    #[test]
    fn length_mismatch_is_dimension_error() {
        let a = GaussianOperator::<f64>::new(3, 5, 1).unwrap();
        assert!(matches!(a.apply(&SignalVector::zeros(4, 1)), Err(Error::Dimension(_))));
        assert!(matches!(
            a.apply_adjoint(&MeasurementVector::Real(vec![0.0; 2])),
            Err(Error::Dimension(_))
        ));
    }
}
