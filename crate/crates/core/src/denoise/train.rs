//! Supervised AWGN training of a single CNN denoiser.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{cnn, DenoiserModel, DenoiserSpec};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, AdamState, BnMode, Gradients, LayerGrads, LayerParams, PlateauSchedule, Tape, Tensor4};
use crate::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate ladder, stepped down on validation plateaus.
    pub lr_rates: Vec<f64>,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr_rates: vec![1e-3, 1e-4, 1e-5], patience: 2, seed: 0 }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(1..=256).contains(&self.batch_size) {
            return Err(Error::Config(format!("batch size {} outside [1, 256]", self.batch_size)));
        }
        if self.lr_rates.is_empty() || self.lr_rates.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn plateau(&self) -> PlateauSchedule {
        PlateauSchedule::new(self.lr_rates.clone(), self.patience.max(1))
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: DenoiserModel,
    /// Training loss of every optimizer step.
    pub loss_curve: Vec<f64>,
    /// Held-out MSE before training followed by one entry per epoch.
    pub val_curve: Vec<f64>,
}

/// Orders per-slot gradients as `0..n`, zero-filling unused slots.
pub(crate) fn ordered_grads(grads: Gradients<Real>, layers: &[LayerParams<Real>], base: usize) -> Vec<LayerGrads<Real>> {
    let mut map = grads.into_layers();
    layers
        .iter()
        .enumerate()
        .map(|(i, l)| match map.remove(&(base + i)) {
            Some(mut g) => {
                let z = LayerGrads::zeros_like(l);
                if g.kernels.is_empty() {
                    g.kernels = z.kernels;
                }
                if g.bias.is_empty() {
                    g.bias = z.bias;
                }
                if l.bn.is_some() {
                    g.gamma.get_or_insert(z.gamma.unwrap_or_default());
                    g.beta.get_or_insert(z.beta.unwrap_or_default());
                }
                g
            }
            None => LayerGrads::zeros_like(l),
        })
        .collect()
}

/// One Adam step on `mean((D(noisy) - clean)^2)`; returns the loss before
/// the update.
pub(crate) fn fit_step(
    layers: &mut [LayerParams<Real>],
    adam: &mut AdamState<Real>,
    noisy: Tensor4<Real>,
    clean: &Tensor4<Real>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(noisy);
    let out = cnn::record(&mut tape, layers, x, BnMode::Train, 0)?;
    let (loss, grad) = mse_and_grad(tape.value(out), clean)?;
    if !loss.is_finite() {
        return Err(Error::Training { layer: 0, what: format!("loss is {loss}") });
    }
    let grads = tape.backward(out, grad)?;
    let ordered = ordered_grads(grads, layers, 0);
    adam.step(layers, &ordered)?;
    Ok(loss)
}

/// `mean((out - target)^2)` and its gradient with respect to `out`.
pub(crate) fn mse_and_grad(out: &Tensor4<Real>, target: &Tensor4<Real>) -> Result<(f64, Tensor4<Real>)> {
    let diff = out.sub(target)?;
    let count = diff.len() as f64;
    let loss = diff.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / count;
    let scale = Real::of(2.0 / count);
    Ok((loss, diff.map(|v| v * scale)))
}

/// Adds noise of standard deviation `sigmas[i]` to patch `i`.
pub(crate) fn add_awgn(clean: &Tensor4<Real>, sigmas: &[f64], rng: &mut Rng) -> Tensor4<Real> {
    let mut noisy = clean.clone();
    for (i, s) in sigmas.iter().enumerate() {
        for v in noisy.sample_mut(i) {
            *v += Real::of(s * rng::normal::<f64>(rng));
        }
    }
    noisy
}

pub(crate) fn draw_sigmas(n: usize, range: (f64, f64), rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| if range.1 > range.0 { rng.random_range(range.0..=range.1) } else { range.0 })
        .collect()
}

/// Fixed held-out noise so every evaluation sees the same problems.
pub(crate) struct HeldOut {
    clean: Tensor4<Real>,
    noisy: Tensor4<Real>,
}

impl HeldOut {
    pub(crate) fn new(clean: &Tensor4<Real>, range: (f64, f64), seed: u64) -> Self {
        let sigmas = draw_sigmas(clean.batch(), range, &mut rng::stream(seed, "val-sigma"));
        let noisy = add_awgn(clean, &sigmas, &mut rng::stream(seed, "val-noise"));
        Self { clean: clean.clone(), noisy }
    }

    pub(crate) fn mse(&self, model: &DenoiserModel) -> Result<f64> {
        let b = self.clean.batch();
        let mut sum = 0.0;
        for start in (0..b).step_by(64) {
            let idx: Vec<usize> = (start..(start + 64).min(b)).collect();
            let out = model.denoise_batch(&self.noisy.gather(&idx), 0.0)?;
            let clean = self.clean.gather(&idx);
            sum += out.data().iter().zip(clean.data()).map(|(a, c)| ((a - c) as f64).powi(2)).sum::<f64>();
        }
        Ok(sum / self.clean.len() as f64)
    }
}

/// Trains a CNN denoiser on `patches` (N, s, s, c) with per-patch noise
/// standard deviation uniform in `sigma_range` (pixel units, not 0–255).
///
/// With `val` given, the returned weights are the best held-out checkpoint,
/// the untrained initialization included.
pub fn train_denoiser(
    spec: &DenoiserSpec,
    patches: &Tensor4<Real>,
    val: Option<&Tensor4<Real>>,
    sigma_range: (f64, f64),
    schedule: &TrainSchedule,
) -> Result<TrainedDenoiser> {
    let DenoiserSpec::Cnn(arch) = spec else {
        return Err(Error::Config("only CNN denoisers are trainable".into()));
    };
    schedule.validate()?;
    if patches.is_empty() {
        return Err(Error::Argument("no training patches".into()));
    }
    if !(sigma_range.0 <= sigma_range.1) || sigma_range.0 < 0.0 {
        return Err(Error::Argument(format!("bad sigma range {sigma_range:?}")));
    }
    if patches.channels() != arch.channels {
        return Err(Error::dim("patch channels differ from the architecture"));
    }

    let mut model = DenoiserModel::init(*spec, schedule.seed)?;
    let mut adam = AdamState::new(AdamConfig { lr: schedule.lr_rates[0], ..AdamConfig::default() }, &model.layers);
    let mut plateau = schedule.plateau();
    let held = val.map(|v| HeldOut::new(v, sigma_range, schedule.seed));
    let mut val_curve = Vec::new();
    let mut best = None;
    if let Some(h) = &held {
        let v = h.mse(&model)?;
        val_curve.push(v);
        best = Some((v, model.layers.clone()));
    }

    let mut order: Vec<usize> = (0..patches.batch()).collect();
    let mut shuffle = rng::stream(schedule.seed, "shuffle");
    let mut noise = rng::stream(schedule.seed, "train-noise");
    let mut loss_curve = Vec::new();
    for _ in 0..schedule.epochs {
        order.shuffle(&mut shuffle);
        for idx in order.chunks(schedule.batch_size) {
            let clean = patches.gather(idx);
            let sigmas = draw_sigmas(idx.len(), sigma_range, &mut noise);
            let noisy = add_awgn(&clean, &sigmas, &mut noise);
            loss_curve.push(fit_step(&mut model.layers, &mut adam, noisy, &clean)?);
        }
        if let Some(h) = &held {
            let v = h.mse(&model)?;
            val_curve.push(v);
            adam.config.lr = plateau.observe(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, model.layers.clone()));
            }
        }
    }
    if let Some((_, layers)) = best {
        model.layers = layers;
    }
    Ok(TrainedDenoiser { model, loss_curve, val_curve })
}
