//! Measurement operators `A` and their adjoints.
//!
//! Two families: dense i.i.d. Gaussian matrices (real measurements) and
//! coded diffraction patterns (random phase mask, unitary 2D FFT, uniform
//! subsampling; complex measurements). Randomized operators are pure
//! functions of their dimensions and seed, so only [`OperatorSpec`] is ever
//! serialized.

mod cdp;
mod gaussian;
mod signal;

pub use cdp::CodedDiffractionOperator;
pub use gaussian::GaussianOperator;
pub use signal::{MeasurementVector, SignalVector};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// A linear map `A : R^n -> R^m` (or `C^m`) with its adjoint.
pub trait MeasurementOperator<T: Scalar>: Send + Sync {
    /// Number of measurements.
    fn m(&self) -> usize;
    /// Signal length.
    fn n(&self) -> usize;
    /// Image shape used for adjoint outputs.
    fn shape(&self) -> (usize, usize);

    fn apply(&self, x: &SignalVector<T>) -> Result<MeasurementVector<T>>;

    /// `A^H y`. For complex operators only the real part is returned, which
    /// is the adjoint of `A` restricted to real signals.
    fn apply_adjoint(&self, y: &MeasurementVector<T>) -> Result<SignalVector<T>>;

    fn zero_measurement(&self) -> MeasurementVector<T>;

    fn check_signal(&self, x: &SignalVector<T>) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::dim(format!("signal length {} but operator expects {}", x.len(), self.n())));
        }
        Ok(())
    }

    fn check_measurement(&self, y: &MeasurementVector<T>) -> Result<()> {
        if y.len() != self.m() {
            return Err(Error::dim(format!(
                "measurement length {} but operator produces {}",
                y.len(),
                self.m()
            )));
        }
        Ok(())
    }
}

/// Number of measurements for sampling rate `rate = m / n`, at least one.
pub fn measurements_for_rate(n: usize, rate: f64) -> usize {
    ((rate * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Serializable operator description; matrices and masks are regenerated
/// from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Gaussian {
        m: usize,
        n: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<[usize; 2]>,
        seed: u64,
    },
    Cdp {
        m: usize,
        shape: [usize; 2],
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Gaussian,
    Cdp,
}

impl std::str::FromStr for OperatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "cdp" => Ok(Self::Cdp),
            other => Err(Error::Argument(format!("unknown operator kind '{other}'"))),
        }
    }
}

impl OperatorSpec {
    pub fn for_image(kind: OperatorKind, shape: (usize, usize), rate: f64, seed: u64) -> Self {
        let n = shape.0 * shape.1;
        let m = measurements_for_rate(n, rate);
        match kind {
            OperatorKind::Gaussian => {
                OperatorSpec::Gaussian { m, n, shape: Some([shape.0, shape.1]), seed }
            }
            OperatorKind::Cdp => OperatorSpec::Cdp { m, shape: [shape.0, shape.1], seed },
        }
    }

    pub fn build<T: Scalar>(&self) -> Result<Operator<T>> {
        match *self {
            OperatorSpec::Gaussian { m, n, shape, seed } => {
                let op = GaussianOperator::new(m, n, seed)?;
                Ok(Operator::Gaussian(match shape {
                    Some([h, w]) => op.with_shape(h, w)?,
                    None => op,
                }))
            }
            OperatorSpec::Cdp { m, shape, seed } => {
                Ok(Operator::Cdp(CodedDiffractionOperator::new((shape[0], shape[1]), m, seed)?))
            }
        }
    }
}

/// Either operator kind behind one type.
#[derive(Debug, Clone)]
pub enum Operator<T: Scalar> {
    Gaussian(GaussianOperator<T>),
    Cdp(CodedDiffractionOperator<T>),
}

impl<T: Scalar> MeasurementOperator<T> for Operator<T> {
    fn m(&self) -> usize {
        match self {
            Operator::Gaussian(o) => o.m(),
            Operator::Cdp(o) => o.m(),
        }
    }
    fn n(&self) -> usize {
        match self {
            Operator::Gaussian(o) => o.n(),
            Operator::Cdp(o) => o.n(),
        }
    }
    fn shape(&self) -> (usize, usize) {
        match self {
            Operator::Gaussian(o) => o.shape(),
            Operator::Cdp(o) => o.shape(),
        }
    }
    fn apply(&self, x: &SignalVector<T>) -> Result<MeasurementVector<T>> {
        match self {
            Operator::Gaussian(o) => o.apply(x),
            Operator::Cdp(o) => o.apply(x),
        }
    }
    fn apply_adjoint(&self, y: &MeasurementVector<T>) -> Result<SignalVector<T>> {
        match self {
            Operator::Gaussian(o) => o.apply_adjoint(y),
            Operator::Cdp(o) => o.apply_adjoint(y),
        }
    }
    fn zero_measurement(&self) -> MeasurementVector<T> {
        match self {
            Operator::Gaussian(o) => o.zero_measurement(),
            Operator::Cdp(o) => o.zero_measurement(),
        }
    }
}

/// Additive white Gaussian noise on the measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_eps: f64,
    pub seed: u64,
}

/// `y + sigma_eps * g`. Complex measurements get circular noise with
/// per-component standard deviation `sigma_eps / sqrt(2)`.
pub fn add_noise<T: Scalar>(y: &MeasurementVector<T>, spec: NoiseSpec) -> Result<MeasurementVector<T>> {
    if !(spec.sigma_eps >= 0.0) {
        return Err(Error::Argument(format!("noise sigma {} must be >= 0", spec.sigma_eps)));
    }
    if spec.sigma_eps == 0.0 {
        return Ok(y.clone());
    }
    let mut r = rng::stream(spec.seed, "measurement-noise");
    Ok(match y {
        MeasurementVector::Real(v) => MeasurementVector::Real(
            v.iter()
                .map(|&a| a + T::of(spec.sigma_eps * rng::normal::<f64>(&mut r)))
                .collect(),
        ),
        MeasurementVector::Complex(v) => {
            let s = spec.sigma_eps / 2f64.sqrt();
            MeasurementVector::Complex(
                v.iter()
                    .map(|&a| {
                        let re = s * rng::normal::<f64>(&mut r);
                        let im = s * rng::normal::<f64>(&mut r);
                        a + Complex::new(T::of(re), T::of(im))
                    })
                    .collect(),
            )
        }
    })
}
