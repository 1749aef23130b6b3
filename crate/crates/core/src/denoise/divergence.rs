use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{Error, Result};
use crate::measure::SignalVector;
use crate::rng;
use crate::scalar::Scalar;

/// Probe settings for the Monte-Carlo divergence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Number of probe vectors averaged per estimate.
    pub probes: usize,
    /// Finite-difference step; `None` picks [`default_eps_probe`].
    pub eps: Option<f64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { probes: 1, eps: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub probe_seed: u64,
    pub eps_probe: f64,
}

/// `max|x| * 1e-3 + 1e-12`.
pub fn default_eps_probe<T: Scalar>(x: &SignalVector<T>) -> f64 {
    let m = x.values().iter().fold(0.0f64, |acc, v| acc.max(v.f64().abs()));
    m * 1e-3 + 1e-12
}

/// `<eta, J eta>` averaged over `probes` standard normal probes drawn from
/// `probe_seed`. `J eta` is exact when the denoiser provides it and the
/// finite difference `(D(x + eps eta) - D(x)) / eps` otherwise.
pub fn mc_divergence<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    x: &SignalVector<T>,
    sigma: T,
    probe_seed: u64,
    probe: ProbeConfig,
) -> Result<DivergenceEstimate> {
    let dx = denoiser.denoise(x, sigma)?;
    mc_divergence_with(denoiser, x, &dx, sigma, probe_seed, probe)
}

/// Same as [`mc_divergence`] with `D(x)` already computed.
pub fn mc_divergence_with<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    x: &SignalVector<T>,
    dx: &SignalVector<T>,
    sigma: T,
    probe_seed: u64,
    probe: ProbeConfig,
) -> Result<DivergenceEstimate> {
    let eps = probe.eps.unwrap_or_else(|| default_eps_probe(x));
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("probe step {eps} must be positive")));
    }
    if probe.probes == 0 {
        return Err(Error::Argument("at least one divergence probe is required".into()));
    }
    let mut r = rng::stream(probe_seed, "divergence-probe");
    let mut total = 0.0;
    for _ in 0..probe.probes {
        let eta: Vec<T> = rng::normal_vec(&mut r, x.len());
        let dir = x.with_values(eta);
        total += match denoiser.jacobian_vector(x, sigma, &dir) {
            Some(jv) => dir.dot(&jv?),
            None => {
                let moved = x.with_values(x.values().iter().zip(dir.values()).map(|(a, e)| *a + T::of(eps) * *e).collect());
                let dm = denoiser.denoise(&moved, sigma)?;
                let s: f64 = dir
                    .values()
                    .iter()
                    .zip(dm.values().iter().zip(dx.values()))
                    .map(|(e, (a, b))| e.f64() * (a.f64() - b.f64()))
                    .sum();
                s / eps
            }
        };
    }
    let value = total / probe.probes as f64;
    if !value.is_finite() {
        return Err(Error::Numeric { iter: 0, what: "divergence estimate is not finite".into() });
    }
    Ok(DivergenceEstimate { value, probe_seed, eps_probe: eps })
}
