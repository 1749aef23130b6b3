//! Denoisers `D_sigma`: analytic baselines, the residual CNN, and the
//! Monte-Carlo divergence estimate the Onsager correction needs.
//!
//! Pixels live in `[0, 1]`; `sigma` passed to [`Denoiser::denoise`] is in the
//! same units. Noise-level bins are quoted on the 0–255 scale.

pub mod cnn;
mod divergence;
pub(crate) mod train;
mod transform;
mod weights;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use cnn::CnnArch;
pub use divergence::{default_eps_probe, mc_divergence, mc_divergence_with, DivergenceEstimate, ProbeConfig};
pub use train::{train_denoiser, TrainSchedule, TrainedDenoiser};
pub use transform::{gaussian_blur, Dct2};
pub use weights::{load_model, read_model, save_model, write_model, MAGIC};

use crate::error::{Error, Result};
use crate::measure::SignalVector;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, LayerParams, Tensor4};
use crate::Real;

pub trait Denoiser<T: Scalar>: Send + Sync {
    fn denoise(&self, noisy: &SignalVector<T>, sigma: T) -> Result<SignalVector<T>>;

    /// `J v` with `J` the Jacobian of `denoise(., sigma)` at `noisy`, for
    /// denoisers that know it in closed form. The divergence estimator falls
    /// back to a finite difference when this returns `None`.
    fn jacobian_vector(&self, _noisy: &SignalVector<T>, _sigma: T, _v: &SignalVector<T>) -> Option<Result<SignalVector<T>>> {
        None
    }
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn denoise(&self, noisy: &SignalVector<T>, sigma: T) -> Result<SignalVector<T>> {
        (**self).denoise(noisy, sigma)
    }
    fn jacobian_vector(&self, noisy: &SignalVector<T>, sigma: T, v: &SignalVector<T>) -> Option<Result<SignalVector<T>>> {
        (**self).jacobian_vector(noisy, sigma, v)
    }
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> Denoiser<T> for Arc<D> {
    fn denoise(&self, noisy: &SignalVector<T>, sigma: T) -> Result<SignalVector<T>> {
        (**self).denoise(noisy, sigma)
    }
    fn jacobian_vector(&self, noisy: &SignalVector<T>, sigma: T, v: &SignalVector<T>) -> Option<Result<SignalVector<T>>> {
        (**self).jacobian_vector(noisy, sigma, v)
    }
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> Denoiser<T> for Box<D> {
    fn denoise(&self, noisy: &SignalVector<T>, sigma: T) -> Result<SignalVector<T>> {
        (**self).denoise(noisy, sigma)
    }
    fn jacobian_vector(&self, noisy: &SignalVector<T>, sigma: T, v: &SignalVector<T>) -> Option<Result<SignalVector<T>>> {
        (**self).jacobian_vector(noisy, sigma, v)
    }
}

/// `sign(v) * max(|v| - lambda, 0)` elementwise.
pub fn soft_threshold<T: Scalar>(v: &[T], lambda: T) -> Vec<T> {
    v.iter()
        .map(|&x| {
            let mag = x.abs() - lambda;
            if mag > T::zero() {
                mag * x.signum()
            } else {
                T::zero()
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    Identity,
    /// Blur with a fixed standard deviation (pixels), independent of sigma.
    GaussianBlur { radius: f64 },
    /// Soft threshold in the orthonormal 2D DCT domain at `multiplier * sigma`.
    SoftThresholdDct { multiplier: f64 },
    Cnn(CnnArch),
}

impl DenoiserSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DenoiserSpec::Identity => Ok(()),
            DenoiserSpec::GaussianBlur { radius } if *radius >= 0.0 => Ok(()),
            DenoiserSpec::SoftThresholdDct { multiplier } if *multiplier >= 0.0 => Ok(()),
            DenoiserSpec::Cnn(a) => a.validate(),
            other => Err(Error::Config(format!("invalid denoiser parameters: {other:?}"))),
        }
    }

    /// Parses the short names used on the command line.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::Identity),
            "gaussian_blur" | "blur" => Some(Self::GaussianBlur { radius: 1.0 }),
            "soft_threshold_dct" | "dct" => Some(Self::SoftThresholdDct { multiplier: 1.0 }),
            _ => None,
        }
    }
}

/// Noise-level interval `(lo, hi]` on the 0–255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaBin {
    pub lo: f64,
    pub hi: f64,
}

impl SigmaBin {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || lo < 0.0 {
            return Err(Error::Config(format!("sigma bin ({lo}, {hi}] is empty or negative")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, sigma255: f64) -> bool {
        sigma255 > self.lo && sigma255 <= self.hi
    }
}

/// A concrete denoiser: its spec, CNN weights if any, and the noise bin it
/// was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    pub spec: DenoiserSpec,
    pub layers: Vec<LayerParams<Real>>,
    pub sigma_bin: Option<SigmaBin>,
    /// Batch-norm statistics used at inference (running by default).
    pub bn_mode: BnMode,
}

impl DenoiserModel {
    pub fn analytic(spec: DenoiserSpec) -> Result<Self> {
        spec.validate()?;
        if matches!(spec, DenoiserSpec::Cnn(_)) {
            return Err(Error::Config("a CNN denoiser needs weights; use DenoiserModel::init".into()));
        }
        Ok(Self { spec, layers: Vec::new(), sigma_bin: None, bn_mode: BnMode::Infer })
    }

    pub fn identity() -> Self {
        Self::analytic(DenoiserSpec::Identity).expect("identity is valid")
    }

    /// Fresh model; CNN weights are He-initialized from `seed`.
    pub fn init(spec: DenoiserSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = match &spec {
            DenoiserSpec::Cnn(arch) => arch.init(&mut rng::stream(seed, "init")),
            _ => Vec::new(),
        };
        Ok(Self { spec, layers, sigma_bin: None, bn_mode: BnMode::Infer })
    }

    pub fn with_sigma_bin(mut self, bin: SigmaBin) -> Self {
        self.sigma_bin = Some(bin);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        match &self.spec {
            DenoiserSpec::Cnn(arch) => arch.check_layers(&self.layers),
            _ if !self.layers.is_empty() => Err(Error::Config("analytic denoiser carries weights".into())),
            _ => Ok(()),
        }
    }

    /// Noise prediction of the CNN for a batch; zero for analytic kinds.
    pub fn residual_batch(&self, x: &Tensor4<Real>) -> Result<Tensor4<Real>> {
        match &self.spec {
            DenoiserSpec::Cnn(arch) => {
                if x.channels() != arch.channels {
                    return Err(Error::dim(format!(
                        "denoiser expects {} channels, got {}",
                        arch.channels,
                        x.channels()
                    )));
                }
                cnn::residual_forward(&self.layers, x, self.bn_mode)
            }
            _ => Ok(Tensor4::zeros(x.shape())),
        }
    }

    /// Denoises every image of a single-channel batch.
    pub fn denoise_batch(&self, x: &Tensor4<Real>, sigma: f64) -> Result<Tensor4<Real>> {
        match &self.spec {
            DenoiserSpec::Cnn(_) => x.sub(&self.residual_batch(x)?),
            _ => {
                let [b, h, w, c] = x.shape();
                if c != 1 {
                    return Err(Error::dim("analytic denoisers are single-channel"));
                }
                let mut out = Tensor4::zeros(x.shape());
                for i in 0..b {
                    let s = SignalVector::new(h, w, x.sample(i).to_vec())?;
                    let d = self.denoise(&s, Real::of(sigma))?;
                    out.sample_mut(i).copy_from_slice(d.values());
                }
                Ok(out)
            }
        }
    }
}

impl<T: Scalar> Denoiser<T> for DenoiserModel {
    fn denoise(&self, noisy: &SignalVector<T>, sigma: T) -> Result<SignalVector<T>> {
        let (h, w) = noisy.shape();
        match &self.spec {
            DenoiserSpec::Identity => Ok(noisy.clone()),
            DenoiserSpec::GaussianBlur { radius } => {
                Ok(noisy.with_values(gaussian_blur(noisy.values(), h, w, *radius)))
            }
            DenoiserSpec::SoftThresholdDct { multiplier } => {
                let dct = Dct2::new(h, w);
                let coeffs = dct.forward(noisy.values());
                let shrunk = soft_threshold(&coeffs, sigma * T::of(*multiplier));
                Ok(noisy.with_values(dct.inverse(&shrunk)))
            }
            DenoiserSpec::Cnn(arch) => {
                if arch.channels != 1 {
                    return Err(Error::dim("signal denoising supports single-channel CNNs only"));
                }
                let x = Tensor4::new([1, h, w, 1], noisy.values().iter().map(|v| Real::of(v.f64())).collect())?;
                let r = self.residual_batch(&x)?;
                Ok(noisy.with_values(
                    noisy.values().iter().zip(r.data()).map(|(a, b)| *a - T::of(b.f64())).collect(),
                ))
            }
        }
    }

    /// Exact for the analytic kinds: the blur is linear and the DCT shrinkage
    /// keeps the coefficients that survive the threshold.
    fn jacobian_vector(&self, noisy: &SignalVector<T>, sigma: T, v: &SignalVector<T>) -> Option<Result<SignalVector<T>>> {
        if noisy.shape() != v.shape() {
            return Some(Err(Error::dim("jacobian direction does not match the signal")));
        }
        let (h, w) = noisy.shape();
        match &self.spec {
            DenoiserSpec::Identity => Some(Ok(v.clone())),
            DenoiserSpec::GaussianBlur { radius } => Some(Ok(v.with_values(gaussian_blur(v.values(), h, w, *radius)))),
            DenoiserSpec::SoftThresholdDct { multiplier } => {
                let dct = Dct2::new(h, w);
                let lambda = sigma * T::of(*multiplier);
                let kept: Vec<T> = dct
                    .forward(noisy.values())
                    .iter()
                    .zip(dct.forward(v.values()))
                    .map(|(c, d)| if c.abs() > lambda { d } else { T::zero() })
                    .collect();
                Some(Ok(v.with_values(dct.inverse(&kept))))
            }
            DenoiserSpec::Cnn(_) => None,
        }
    }
}
