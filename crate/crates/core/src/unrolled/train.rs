use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{check_bins, default_bins, DenoiserBank, UnrolledNetwork};
use crate::amp::Variant;
use crate::denoise::cnn::{self, CnnArch};
use crate::denoise::train::{mse_and_grad, ordered_grads};
use crate::denoise::{train_denoiser, DenoiserModel, DenoiserSpec, ProbeConfig, SigmaBin, TrainSchedule, TrainedDenoiser};
use crate::error::{Error, Result};
use crate::measure::{measurements_for_rate, GaussianOperator, MeasurementOperator, NoiseSpec, SignalVector};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::{AdamConfig, AdamState, BnMode, LayerGrads, Tape, Tensor4, Var};
use crate::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    EndToEnd,
    LayerByLayer,
    DenoiserByDenoiser,
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" | "end_to_end" => Ok(Regime::EndToEnd),
            "lbl" | "layer_by_layer" => Ok(Regime::LayerByLayer),
            "dbd" | "denoiser_by_denoiser" => Ok(Regime::DenoiserByDenoiser),
            _ => Err(Error::Argument(format!("unknown regime `{s}` (expected e2e, lbl or dbd)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub variant: Variant,
    pub layers: usize,
    pub arch: CnnArch,
    /// `m / n`; ignored by denoiser-by-denoiser training.
    pub sampling_rate: f64,
    /// Measurement noise standard deviation (pixel units).
    pub sigma_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_rates: Vec<f64>,
    pub patience: usize,
    pub seed: u64,
    /// Draw a new Gaussian matrix for every mini-batch.
    pub fresh_matrix_per_batch: bool,
    pub probe: ProbeConfig,
    /// Noise bins for denoiser-by-denoiser training (0–255 scale).
    pub bins: Vec<SigmaBin>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = TrainSchedule::default();
        Self {
            regime: Regime::LayerByLayer,
            variant: Variant::Damp,
            layers: 10,
            arch: CnnArch::default(),
            sampling_rate: 0.2,
            sigma_eps: 0.0,
            epochs: s.epochs,
            batch_size: s.batch_size,
            lr_rates: s.lr_rates,
            patience: s.patience,
            seed: 0,
            fresh_matrix_per_batch: true,
            probe: ProbeConfig::default(),
            bins: default_bins(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_rates: self.lr_rates.clone(),
            patience: self.patience,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.arch.validate()?;
        if self.arch.channels != 1 {
            return Err(Error::Config("unrolled training supports single-channel images".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return Err(Error::Config(format!("sampling rate {} outside (0, 1]", self.sampling_rate)));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::Config("measurement noise must be >= 0".into()));
        }
        if self.probe.probes == 0 {
            return Err(Error::Config("at least one divergence probe is required".into()));
        }
        check_bins(&self.bins)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedNetwork {
    pub network: UnrolledNetwork,
    /// Training loss of every optimizer step (all stages, in order).
    pub loss_curve: Vec<f64>,
    /// Held-out final-layer MSE: before training, then once per epoch.
    pub val_curve: Vec<f64>,
    /// Network after each greedy stage (layer-by-layer only).
    pub stages: Vec<UnrolledNetwork>,
}

/// A batch of measured patches under one Gaussian matrix.
struct Problem {
    m: usize,
    n: usize,
    shape: [usize; 4],
    /// `m x n`, row-major.
    a: Vec<Real>,
    /// `batch x m`.
    y: Vec<Real>,
}

/// `x A^T` for rows `x` of length `n`.
fn forward_rows(x: &[Real], rows: usize, a: &[Real], m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * m];
    Real::gemm(rows, n, m, x, (n, 1), a, (1, n), 0.0, &mut out, (m, 1));
    out
}

/// `z A` for rows `z` of length `m`.
fn adjoint_rows(z: &[Real], rows: usize, a: &[Real], m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; rows * n];
    Real::gemm(rows, m, n, z, (m, 1), a, (n, 1), 0.0, &mut out, (n, 1));
    out
}

impl Problem {
    fn new(clean: &Tensor4<Real>, m: usize, matrix_seed: u64, noise: NoiseSpec) -> Result<Self> {
        let shape = clean.shape();
        let n = shape[1] * shape[2];
        let a = GaussianOperator::<Real>::new(m, n, matrix_seed)?.matrix().to_vec();
        let mut y = forward_rows(clean.data(), shape[0], &a, m, n);
        if noise.sigma_eps > 0.0 {
            let mut r = rng::stream(noise.seed, "measurement-noise");
            for v in &mut y {
                *v += Real::of(noise.sigma_eps * rng::normal::<f64>(&mut r));
            }
        }
        Ok(Self { m, n, shape, a, y })
    }
}

struct LayerPass {
    z: Vec<Real>,
    /// `div / m` per sample, the next layer's Onsager coefficient.
    coef: Vec<f64>,
    tape: Option<(Tape<Real>, Var, Var)>,
    out: Tensor4<Real>,
}

fn training_error(layer: usize, what: impl Into<String>) -> Error {
    Error::Training { layer, what: what.into() }
}

/// Runs the unrolled network on a batch. Layers flagged in `record` run in
/// train mode on a tape; the rest use their inference statistics.
fn run_layers(
    models: &mut [DenoiserModel],
    record: &[bool],
    variant: Variant,
    p: &Problem,
    probe: ProbeConfig,
    probe_rng: &mut Rng,
    coef_override: Option<&[Vec<f64>]>,
) -> Result<Vec<LayerPass>> {
    let [batch, _, _, _] = p.shape;
    let depth = models.len();
    let mut x = Tensor4::<Real>::zeros(p.shape);
    let mut passes: Vec<LayerPass> = Vec::with_capacity(depth);
    for l in 0..depth {
        let ax = forward_rows(x.data(), batch, &p.a, p.m, p.n);
        let mut z: Vec<Real> = p.y.iter().zip(&ax).map(|(y, v)| y - v).collect();
        if let (Variant::Damp, Some(prev)) = (variant, passes.last()) {
            for (i, row) in z.chunks_mut(p.m).enumerate() {
                let c = Real::of(prev.coef[i]);
                for (v, zp) in row.iter_mut().zip(&prev.z[i * p.m..(i + 1) * p.m]) {
                    *v += c * zp;
                }
            }
        }
        let atz = adjoint_rows(&z, batch, &p.a, p.m, p.n);
        let r = Tensor4::new(p.shape, x.data().iter().zip(&atz).map(|(a, b)| a + b).collect())?;
        let model = &mut models[l];
        let (out, tape, mode) = if record[l] {
            let mut tape = Tape::new();
            let v = tape.leaf(r.clone());
            let o = cnn::record(&mut tape, &mut model.layers, v, BnMode::Train, 0)?;
            (tape.value(o).clone(), Some((tape, v, o)), BnMode::Train)
        } else {
            (r.sub(&cnn::residual_forward(&model.layers, &r, model.bn_mode)?)?, None, model.bn_mode)
        };
        if !out.is_finite() {
            return Err(training_error(l, "non-finite denoiser output"));
        }
        let mut coef = vec![0.0; batch];
        if variant == Variant::Damp && l + 1 < depth {
            let eps: Vec<f64> = (0..batch)
                .map(|i| {
                    probe.eps.unwrap_or_else(|| {
                        r.sample(i).iter().fold(0.0f64, |acc, v| acc.max(v.abs() as f64)) * 1e-3 + 1e-12
                    })
                })
                .collect();
            for _ in 0..probe.probes {
                let eta: Vec<f64> = (0..r.len()).map(|_| rng::normal::<f64>(probe_rng)).collect();
                let n = p.n;
                let moved = Tensor4::new(
                    p.shape,
                    r.data().iter().zip(&eta).enumerate().map(|(k, (v, e))| v + Real::of(eps[k / n] * e)).collect(),
                )?;
                let dm = moved.sub(&cnn::residual_forward(&model.layers, &moved, mode)?)?;
                for (i, c) in coef.iter_mut().enumerate() {
                    let s: f64 = (i * n..(i + 1) * n).map(|k| eta[k] * (dm.data()[k] - out.data()[k]) as f64).sum();
                    *c += s / eps[i] / probe.probes as f64 / p.m as f64;
                }
            }
            if coef.iter().any(|c| !c.is_finite()) {
                return Err(training_error(l, "non-finite divergence"));
            }
        }
        if let Some(fixed) = coef_override {
            coef.clone_from(&fixed[l]);
        }
        x = out.clone();
        passes.push(LayerPass { z, coef, tape, out });
    }
    Ok(passes)
}

/// Fixed held-out problems, re-evaluated after every epoch.
struct ValSet {
    chunks: Vec<(Tensor4<Real>, Problem)>,
    seed: u64,
    count: usize,
}

impl ValSet {
    fn new(val: &Tensor4<Real>, cfg: &TrainConfig, m: usize) -> Result<Self> {
        let mut chunks = Vec::new();
        let idx: Vec<usize> = (0..val.batch()).collect();
        for (k, c) in idx.chunks(cfg.batch_size).enumerate() {
            let clean = val.gather(c);
            let matrix_seed = rng::stream_seed(cfg.seed, "val-matrix") ^ k as u64;
            let noise = NoiseSpec { sigma_eps: cfg.sigma_eps, seed: rng::stream_seed(cfg.seed, "val-noise") ^ k as u64 };
            let p = Problem::new(&clean, m, matrix_seed, noise)?;
            chunks.push((clean, p));
        }
        Ok(Self { chunks, seed: cfg.seed, count: val.len() })
    }

    /// Mean MSE after each layer.
    fn per_layer(&self, models: &mut [DenoiserModel], variant: Variant, probe: ProbeConfig) -> Result<Vec<f64>> {
        let mut r = rng::stream(self.seed, "val-probe");
        let record = vec![false; models.len()];
        let mut sums = vec![0.0; models.len()];
        for (clean, p) in &self.chunks {
            for (l, pass) in run_layers(models, &record, variant, p, probe, &mut r, None)?.iter().enumerate() {
                sums[l] += pass.out.data().iter().zip(clean.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>();
            }
        }
        Ok(sums.into_iter().map(|s| s / self.count as f64).collect())
    }
}

fn check_patches(patches: &Tensor4<Real>, val: Option<&Tensor4<Real>>) -> Result<()> {
    if patches.is_empty() {
        return Err(Error::Argument("no training patches".into()));
    }
    if patches.channels() != 1 {
        return Err(Error::dim("unrolled training needs single-channel patches"));
    }
    if let Some(v) = val {
        if v.shape()[1..] != patches.shape()[1..] {
            return Err(Error::dim("validation patches differ in shape from training patches"));
        }
    }
    Ok(())
}

fn layer_model(cfg: &TrainConfig, layer: usize) -> Result<DenoiserModel> {
    DenoiserModel::init(DenoiserSpec::Cnn(cfg.arch), cfg.seed.wrapping_add(layer as u64))
}

fn remap_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::Training { what, .. } => Error::Training { layer, what },
        e => e,
    }
}

/// Shared epoch loop: `step` trains on one batch and returns its loss;
/// `validate` returns the held-out loss used for checkpointing.
struct Loop<'a> {
    cfg: &'a TrainConfig,
    patches: &'a Tensor4<Real>,
    m: usize,
    seed: u64,
}

impl Loop<'_> {
    fn run(
        &self,
        models: &mut Vec<DenoiserModel>,
        record: &[bool],
        adams: &mut [(usize, AdamState<Real>)],
        val: Option<&ValSet>,
        loss_curve: &mut Vec<f64>,
        val_curve: &mut Vec<f64>,
    ) -> Result<()> {
        let cfg = self.cfg;
        let mut plateau = cfg.schedule().plateau();
        let val_loss = |models: &mut Vec<DenoiserModel>| -> Result<Option<f64>> {
            val.map(|v| v.per_layer(models, cfg.variant, cfg.probe).map(|p| *p.last().expect("layers")))
                .transpose()
        };
        let mut best = val_loss(models)?.map(|v| (v, models.clone()));
        if let Some((v, _)) = &best {
            val_curve.push(*v);
        }
        let mut order: Vec<usize> = (0..self.patches.batch()).collect();
        let mut shuffle = rng::stream(self.seed, "shuffle");
        let mut probe_rng = rng::stream(self.seed, "train-probe");
        let matrix_base = rng::stream_seed(self.seed, "train-matrix");
        let noise_base = rng::stream_seed(self.seed, "train-noise");
        let mut step = 0u64;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle);
            for idx in order.chunks(cfg.batch_size) {
                let clean = self.patches.gather(idx);
                let k = if cfg.fresh_matrix_per_batch { step } else { 0 };
                let noise = NoiseSpec { sigma_eps: cfg.sigma_eps, seed: noise_base ^ step };
                let p = Problem::new(&clean, self.m, matrix_base ^ k, noise)?;
                let loss = self.step(models, record, adams, &p, &clean, &mut probe_rng)?;
                loss_curve.push(loss);
                step += 1;
            }
            if let Some(v) = val_loss(models)? {
                val_curve.push(v);
                let lr = plateau.observe(v);
                for (_, a) in adams.iter_mut() {
                    a.config.lr = lr;
                }
                if best.as_ref().is_none_or(|(b, _)| v < *b) {
                    best = Some((v, models.clone()));
                }
            }
        }
        if let Some((_, m)) = best {
            *models = m;
        }
        Ok(())
    }

    fn step(
        &self,
        models: &mut [DenoiserModel],
        record: &[bool],
        adams: &mut [(usize, AdamState<Real>)],
        p: &Problem,
        clean: &Tensor4<Real>,
        probe_rng: &mut Rng,
    ) -> Result<f64> {
        let (loss, grads) = gradients(models, record, self.cfg, p, clean, probe_rng, None)?;
        for (l, adam) in adams.iter_mut() {
            let g = grads[*l].as_ref().ok_or_else(|| Error::Usage(format!("layer {l} was not recorded")))?;
            adam.step(&mut models[*l].layers, g).map_err(|e| remap_layer(e, *l))?;
        }
        Ok(loss)
    }
}

/// Final-layer MSE and its parameter gradients for every recorded layer,
/// back-propagated through the measurement steps with the divergence
/// factors held constant.
fn gradients(
    models: &mut [DenoiserModel],
    record: &[bool],
    cfg: &TrainConfig,
    p: &Problem,
    clean: &Tensor4<Real>,
    probe_rng: &mut Rng,
    coef_override: Option<&[Vec<f64>]>,
) -> Result<(f64, Vec<Option<Vec<LayerGrads<Real>>>>)> {
    let depth = models.len();
    let mut passes = run_layers(models, record, cfg.variant, p, cfg.probe, probe_rng, coef_override)?;
    let (loss, mut g_x) = mse_and_grad(&passes[depth - 1].out, clean)?;
    if !loss.is_finite() {
        return Err(training_error(depth - 1, format!("loss is {loss}")));
    }
    let batch = p.shape[0];
    let mut grads: Vec<Option<Vec<LayerGrads<Real>>>> = (0..depth).map(|_| None).collect();
    let mut g_zn: Option<Vec<Real>> = None;
    for l in (0..depth).rev() {
        let Some((mut tape, leaf, out)) = passes[l].tape.take() else { break };
        let mut g = tape.backward(out, g_x)?;
        let g_r = g.take_input(leaf).unwrap_or_else(|| Tensor4::zeros(p.shape));
        grads[l] = Some(ordered_grads(g, &models[l].layers, 0));
        if l == 0 {
            break;
        }
        // r^l = x^l + A^T z^l and z^l = y - A x^l + c^l z^{l-1}.
        let mut g_z = forward_rows(g_r.data(), batch, &p.a, p.m, p.n);
        if let (Variant::Damp, Some(gn)) = (cfg.variant, &g_zn) {
            for (i, row) in g_z.chunks_mut(p.m).enumerate() {
                let c = Real::of(passes[l].coef[i]);
                for (v, n) in row.iter_mut().zip(&gn[i * p.m..(i + 1) * p.m]) {
                    *v += c * n;
                }
            }
        }
        let atg = adjoint_rows(&g_z, batch, &p.a, p.m, p.n);
        g_x = Tensor4::new(p.shape, g_r.data().iter().zip(&atg).map(|(a, b)| a - b).collect())?;
        g_zn = Some(g_z);
    }
    Ok((loss, grads))
}

/// Trains every layer's denoiser jointly on the final-layer MSE.
pub fn train_end_to_end(
    patches: &Tensor4<Real>,
    val: Option<&Tensor4<Real>>,
    cfg: &TrainConfig,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    check_patches(patches, val)?;
    let n = patches.height() * patches.width();
    let m = measurements_for_rate(n, cfg.sampling_rate);
    let mut models = (0..cfg.layers).map(|l| layer_model(cfg, l)).collect::<Result<Vec<_>>>()?;
    let adam = AdamConfig { lr: cfg.lr_rates[0], ..AdamConfig::default() };
    let mut adams: Vec<_> = models.iter().enumerate().map(|(l, m)| (l, AdamState::new(adam, &m.layers))).collect();
    let val_set = val.map(|v| ValSet::new(v, cfg, m)).transpose()?;
    let mut loss_curve = Vec::new();
    let mut val_curve = Vec::new();
    let lp = Loop { cfg, patches, m, seed: cfg.seed };
    lp.run(&mut models, &vec![true; cfg.layers], &mut adams, val_set.as_ref(), &mut loss_curve, &mut val_curve)?;
    Ok(TrainedNetwork {
        network: UnrolledNetwork::per_layer(cfg.variant, models)?,
        loss_curve,
        val_curve,
        stages: Vec::new(),
    })
}

/// Greedy growth: stage `s` appends a layer (warm-started from the previous
/// layer's weights) and trains only it, earlier layers frozen.
pub fn train_layer_by_layer(
    patches: &Tensor4<Real>,
    val: Option<&Tensor4<Real>>,
    cfg: &TrainConfig,
) -> Result<TrainedNetwork> {
    cfg.validate()?;
    check_patches(patches, val)?;
    let n = patches.height() * patches.width();
    let m = measurements_for_rate(n, cfg.sampling_rate);
    let val_set = val.map(|v| ValSet::new(v, cfg, m)).transpose()?;
    let adam = AdamConfig { lr: cfg.lr_rates[0], ..AdamConfig::default() };
    let mut models: Vec<DenoiserModel> = Vec::new();
    let mut loss_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stages = Vec::new();
    for s in 0..cfg.layers {
        let fresh = match models.last() {
            Some(prev) => prev.clone(),
            None => layer_model(cfg, 0)?,
        };
        models.push(fresh);
        let mut record = vec![false; s + 1];
        record[s] = true;
        let mut adams = vec![(s, AdamState::new(adam, &models[s].layers))];
        let lp = Loop { cfg, patches, m, seed: cfg.seed.wrapping_add(s as u64) };
        let mut stage_val = Vec::new();
        lp.run(&mut models, &record, &mut adams, val_set.as_ref(), &mut loss_curve, &mut stage_val)?;
        val_curve.extend(stage_val);
        stages.push(UnrolledNetwork::per_layer(cfg.variant, models.clone())?);
    }
    Ok(TrainedNetwork {
        network: stages.last().expect("at least one layer").clone(),
        loss_curve,
        val_curve,
        stages,
    })
}

#[derive(Debug, Clone)]
pub struct TrainedBank {
    pub bank: DenoiserBank,
    /// One training run per bin, in bin order.
    pub runs: Vec<TrainedDenoiser>,
}

/// One AWGN denoiser per bin with noise uniform over the bin (0–255 scale
/// divided by 255). No measurement operator is involved.
pub fn train_denoiser_by_denoiser(
    patches: &Tensor4<Real>,
    val: Option<&Tensor4<Real>>,
    cfg: &TrainConfig,
) -> Result<TrainedBank> {
    check_bins(&cfg.bins)?;
    cfg.arch.validate()?;
    let mut runs = Vec::with_capacity(cfg.bins.len());
    for (i, bin) in cfg.bins.iter().enumerate() {
        let schedule = TrainSchedule { seed: rng::stream_seed(cfg.seed, "bank-bin").wrapping_add(i as u64), ..cfg.schedule() };
        let mut run = train_denoiser(&DenoiserSpec::Cnn(cfg.arch), patches, val, (bin.lo / 255.0, bin.hi / 255.0), &schedule)?;
        run.model.sigma_bin = Some(*bin);
        runs.push(run);
    }
    let bank = DenoiserBank::new(runs.iter().map(|r| r.model.clone()).collect())?;
    Ok(TrainedBank { bank, runs })
}

/// Mean per-layer MSE of `net` on every patch under Gaussian measurements at
/// `sampling_rate`, through the regular inference path.
pub fn unrolled_mse(
    net: &UnrolledNetwork,
    patches: &Tensor4<Real>,
    sampling_rate: f64,
    sigma_eps: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let [b, h, w, c] = patches.shape();
    if c != 1 {
        return Err(Error::dim("unrolled evaluation needs single-channel patches"));
    }
    let m = measurements_for_rate(h * w, sampling_rate);
    let mut sums = vec![0.0; net.layers()];
    for i in 0..b {
        let x = SignalVector::new(h, w, patches.sample(i).iter().map(|v| *v as f64).collect())?;
        let op = GaussianOperator::<f64>::new(m, h * w, rng::stream_seed(seed, "eval-matrix") ^ i as u64)?
            .with_shape(h, w)?;
        let y = crate::measure::add_noise(
            &op.apply(&x)?,
            NoiseSpec { sigma_eps, seed: rng::stream_seed(seed, "eval-noise") ^ i as u64 },
        )?;
        let (_, trace) = net.forward(&y, &op, ProbeConfig::default(), seed ^ i as u64, Some(&x))?;
        for (s, r) in sums.iter_mut().zip(&trace.records) {
            *s += r.mse.expect("ground truth supplied");
        }
    }
    Ok(sums.into_iter().map(|s| s / b.max(1) as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn patches(n: usize, s: usize, seed: u64) -> Tensor4<Real> {
        let mut r = rng::from_seed(seed);
        let mut t = Tensor4::zeros([n, s, s, 1]);
        for i in 0..n {
            let (a, b): (f64, f64) = (r.random(), r.random());
            for (k, v) in t.sample_mut(i).iter_mut().enumerate() {
                let (y, x) = ((k / s) as f64, (k % s) as f64);
                *v = (0.5 + 0.3 * (a * y + b * x * 0.5).sin()) as Real;
            }
        }
        t
    }

    fn small_cfg(variant: Variant, layers: usize) -> TrainConfig {
        TrainConfig {
            variant,
            layers,
            arch: CnnArch { depth: 4, width: 3, channels: 1, batch_norm: true },
            sampling_rate: 0.5,
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..Default::default()
        }
    }

    fn loss_with(models: &mut [DenoiserModel], cfg: &TrainConfig, p: &Problem, clean: &Tensor4<Real>, coef: &[Vec<f64>]) -> f64 {
        let record = vec![true; models.len()];
        let passes = run_layers(models, &record, cfg.variant, p, cfg.probe, &mut rng::from_seed(0), Some(coef)).unwrap();
        mse_and_grad(&passes.last().unwrap().out, clean).unwrap().0
    }

    fn check_unrolled_gradients(variant: Variant) {
        let cfg = small_cfg(variant, 3);
        let clean = patches(3, 6, 1);
        let p = Problem::new(&clean, 18, 5, NoiseSpec { sigma_eps: 0.0, seed: 0 }).unwrap();
        let models: Vec<_> = (0..3).map(|l| layer_model(&cfg, l).unwrap()).collect();
        let record = vec![true; 3];
        let coef: Vec<Vec<f64>> = run_layers(&mut models.clone(), &record, variant, &p, cfg.probe, &mut rng::from_seed(1), None)
            .unwrap()
            .into_iter()
            .map(|l| l.coef)
            .collect();
        let (_, grads) = gradients(&mut models.clone(), &record, &cfg, &p, &clean, &mut rng::from_seed(1), Some(&coef)).unwrap();
        // Small enough that no ReLU flips sign within the stencil.
        let h = 2e-4f32;
        let mut checked = 0;
        for l in 0..3 {
            let g = grads[l].as_ref().unwrap();
            for (j, lg) in g.iter().enumerate() {
                // The four largest kernel gradients of each conv layer.
                let mut idx: Vec<usize> = (0..lg.kernels.len()).collect();
                idx.sort_by(|a, b| lg.kernels[*b].abs().total_cmp(&lg.kernels[*a].abs()));
                for &k in idx.iter().take(4) {
                    let mut up = models.clone();
                    up[l].layers[j].kernels[k] += h;
                    let mut down = models.clone();
                    down[l].layers[j].kernels[k] -= h;
                    let fd = (loss_with(&mut up, &cfg, &p, &clean, &coef) - loss_with(&mut down, &cfg, &p, &clean, &coef))
                        / (2.0 * h as f64);
                    let a = lg.kernels[k] as f64;
                    assert!(
                        (a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()) + 1e-4,
                        "{variant} layer {l} conv {j} weight {k}: analytic {a} vs finite difference {fd}"
                    );
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, 3 * 4 * 4);
    }

    #[test]
    fn unrolled_gradients_match_finite_differences_damp() {
        check_unrolled_gradients(Variant::Damp);
    }

    #[test]
    fn unrolled_gradients_match_finite_differences_dit() {
        check_unrolled_gradients(Variant::Dit);
    }

    #[test]
    fn zero_epochs_keep_initial_weights() {
        let cfg = TrainConfig { epochs: 0, ..small_cfg(Variant::Damp, 2) };
        let p = patches(8, 6, 2);
        let t = train_end_to_end(&p, Some(&p), &cfg).unwrap();
        let init: Vec<_> = (0..2).map(|l| layer_model(&cfg, l).unwrap()).collect();
        let got: Vec<_> = t.network.layer_models().unwrap().iter().map(|m| (**m).clone()).collect();
        assert_eq!(got, init);
        assert!(t.loss_curve.is_empty());
    }

    #[test]
    fn loss_curve_has_one_entry_per_batch() {
        let cfg = TrainConfig { epochs: 3, ..small_cfg(Variant::Damp, 2) };
        let t = train_end_to_end(&patches(10, 6, 2), None, &cfg).unwrap();
        assert_eq!(t.loss_curve.len(), 3 * 3);
        assert!(t.val_curve.is_empty());
    }

    #[test]
    fn one_layer_greedy_equals_one_layer_end_to_end() {
        let cfg = small_cfg(Variant::Damp, 1);
        let p = patches(8, 6, 4);
        let v = patches(4, 6, 5);
        let a = train_end_to_end(&p, Some(&v), &cfg).unwrap();
        let b = train_layer_by_layer(&p, Some(&v), &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.loss_curve, b.loss_curve);
    }

    #[test]
    fn greedy_stages_freeze_earlier_layers() {
        let cfg = small_cfg(Variant::Damp, 3);
        let p = patches(8, 6, 6);
        let t = train_layer_by_layer(&p, Some(&p), &cfg).unwrap();
        assert_eq!(t.stages.len(), 3);
        let finals = t.network.layer_models().unwrap();
        for (s, stage) in t.stages.iter().enumerate() {
            let models = stage.layer_models().unwrap();
            assert_eq!(models.len(), s + 1);
            for (a, b) in models.iter().zip(finals) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg(Variant::Damp, 2);
        let p = patches(8, 6, 7);
        let a = train_end_to_end(&p, Some(&p), &cfg).unwrap();
        let b = train_end_to_end(&p, Some(&p), &cfg).unwrap();
        assert_eq!(a.network, b.network);
        assert_eq!(a.val_curve, b.val_curve);
    }

    #[test]
    fn bank_models_carry_their_bins() {
        let cfg = TrainConfig { epochs: 1, ..small_cfg(Variant::Damp, 1) };
        let t = train_denoiser_by_denoiser(&patches(4, 6, 8), None, &cfg).unwrap();
        assert_eq!(t.bank.bins(), default_bins());
        for (m, b) in t.bank.models().iter().zip(default_bins()) {
            assert_eq!(m.sigma_bin, Some(b));
        }
    }

    #[test]
    fn config_validation_and_parsing() {
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 257, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { sampling_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!("dbd".parse::<Regime>().unwrap(), Regime::DenoiserByDenoiser);
        assert!("sgd".parse::<Regime>().is_err());
    }
}
