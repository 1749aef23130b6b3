//! Unrolled LDAMP / LDIT networks, the noise-binned denoiser bank, and the
//! three training regimes.

mod train;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::amp::{recover, DenoiserSelector, RecoveryTrace, SolverConfig, Variant};
use crate::denoise::{load_model, save_model, Denoiser, DenoiserModel, ProbeConfig, SigmaBin};
use crate::error::{Error, Result};
use crate::measure::{MeasurementOperator, MeasurementVector, SignalVector};
use crate::scalar::Scalar;

pub use train::{
    train_denoiser_by_denoiser, train_end_to_end, train_layer_by_layer, unrolled_mse, Regime, TrainConfig,
    TrainedBank, TrainedNetwork,
};

/// `(0,10], (10,20], (20,40], (40,80], (80,300]` on the 0–255 scale.
pub fn default_bins() -> Vec<SigmaBin> {
    [(0.0, 10.0), (10.0, 20.0), (20.0, 40.0), (40.0, 80.0), (80.0, 300.0)]
        .into_iter()
        .map(|(lo, hi)| SigmaBin { lo, hi })
        .collect()
}

/// Checks that bins are ascending, start at 0 and leave no gaps.
pub fn check_bins(bins: &[SigmaBin]) -> Result<()> {
    for (i, b) in bins.iter().enumerate() {
        SigmaBin::new(b.lo, b.hi)?;
        let expected_lo = if i == 0 { 0.0 } else { bins[i - 1].hi };
        if b.lo != expected_lo {
            return Err(Error::Config(format!(
                "bin {i} starts at {} but should start at {expected_lo}",
                b.lo
            )));
        }
    }
    Ok(())
}

/// Denoisers indexed by noise level, each trained on its own bin.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenoiserBank {
    models: Vec<Arc<DenoiserModel>>,
}

impl DenoiserBank {
    /// Models must carry contiguous bins starting at 0, in order.
    pub fn new(models: Vec<DenoiserModel>) -> Result<Self> {
        let mut bins = Vec::with_capacity(models.len());
        for (i, m) in models.iter().enumerate() {
            m.validate()?;
            bins.push(m.sigma_bin.ok_or_else(|| Error::Config(format!("bank model {i} has no sigma bin")))?);
        }
        check_bins(&bins)?;
        Ok(Self { models: models.into_iter().map(Arc::new).collect() })
    }

    /// The same model in every slot of `bins`.
    pub fn uniform(model: DenoiserModel, bins: &[SigmaBin]) -> Result<Self> {
        Self::new(bins.iter().map(|b| model.clone().with_sigma_bin(*b)).collect())
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[Arc<DenoiserModel>] {
        &self.models
    }

    pub fn bins(&self) -> Vec<SigmaBin> {
        self.models.iter().filter_map(|m| m.sigma_bin).collect()
    }

    /// Model whose bin holds `sigma255`; clamps below the first and above
    /// the last bin.
    pub fn select(&self, sigma255: f64) -> Result<&Arc<DenoiserModel>> {
        let (first, last) = match (self.models.first(), self.models.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(Error::Config("denoiser bank is empty".into())),
        };
        if sigma255.is_nan() || sigma255 < 0.0 {
            return Err(Error::Argument(format!("noise level {sigma255} must be >= 0")));
        }
        Ok(self
            .models
            .iter()
            .find(|m| m.sigma_bin.is_some_and(|b| b.contains(sigma255)))
            .unwrap_or(if sigma255 <= first.sigma_bin.map_or(0.0, |b| b.hi) { first } else { last }))
    }
}

/// Model for a noise level given on the 0–255 scale.
pub fn select_denoiser(bank: &DenoiserBank, sigma255: f64) -> Result<&DenoiserModel> {
    bank.select(sigma255).map(|m| m.as_ref())
}

/// Bank lookup from a pixel-scale (0–1) estimate.
impl<T: Scalar> DenoiserSelector<T> for DenoiserBank {
    fn select(&self, sigma_hat: f64, _iter: usize) -> Result<&dyn Denoiser<T>> {
        Ok(DenoiserBank::select(self, sigma_hat * 255.0)?.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Weights {
    /// One model per layer.
    PerLayer(Vec<Arc<DenoiserModel>>),
    /// Every layer picks from a shared bank by its noise estimate.
    Banked(Arc<DenoiserBank>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledNetwork {
    pub variant: Variant,
    pub weights: Weights,
    layers: usize,
}

impl UnrolledNetwork {
    pub fn per_layer(variant: Variant, models: Vec<DenoiserModel>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for m in &models {
            m.validate()?;
        }
        let layers = models.len();
        Ok(Self { variant, weights: Weights::PerLayer(models.into_iter().map(Arc::new).collect()), layers })
    }

    pub fn banked(variant: Variant, bank: DenoiserBank, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        if bank.is_empty() {
            return Err(Error::Config("denoiser bank is empty".into()));
        }
        Ok(Self { variant, weights: Weights::Banked(Arc::new(bank)), layers })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Per-layer models, or `None` for a banked network.
    pub fn layer_models(&self) -> Option<&[Arc<DenoiserModel>]> {
        match &self.weights {
            Weights::PerLayer(m) => Some(m),
            Weights::Banked(_) => None,
        }
    }

    /// Runs every layer; both denoiser calls of a layer (estimate and
    /// divergence probe) go through the same shared model.
    pub fn forward<T: Scalar, O: MeasurementOperator<T> + ?Sized>(
        &self,
        y: &MeasurementVector<T>,
        op: &O,
        probe: ProbeConfig,
        seed: u64,
        truth: Option<&SignalVector<T>>,
    ) -> Result<(SignalVector<T>, RecoveryTrace)> {
        let config = SolverConfig { iters: self.layers, variant: self.variant, probe, seed, record_trace: true };
        recover(y, op, self, &config, truth)
    }
}

impl<T: Scalar> DenoiserSelector<T> for UnrolledNetwork {
    fn select(&self, sigma_hat: f64, iter: usize) -> Result<&dyn Denoiser<T>> {
        match &self.weights {
            Weights::PerLayer(models) => models
                .get(iter)
                .map(|m| m.as_ref() as &dyn Denoiser<T>)
                .ok_or_else(|| Error::dim(format!("layer {iter} beyond network depth {}", models.len()))),
            Weights::Banked(bank) => Ok(bank.select(sigma_hat * 255.0)?.as_ref()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankEntry {
    lo: f64,
    hi: f64,
    path: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    bins: Vec<BankEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    PerLayer,
    Banked,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkManifest {
    variant: Variant,
    weight_mode: WeightMode,
    layers: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    models: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bank: Option<PathBuf>,
}

fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// Writes `bin{i}.ldw` files and `bank.json` into `dir`; returns the
/// manifest path.
pub fn save_bank(bank: &DenoiserBank, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bins = Vec::new();
    for (i, m) in bank.models().iter().enumerate() {
        let name = PathBuf::from(format!("bin{i}.ldw"));
        save_model(m, dir.join(&name))?;
        let b = m.sigma_bin.expect("bank models carry bins");
        bins.push(BankEntry { lo: b.lo, hi: b.hi, path: name });
    }
    let path = dir.join("bank.json");
    write_json(&BankManifest { bins }, &path)?;
    Ok(path)
}

pub fn load_bank(manifest: impl AsRef<Path>) -> Result<DenoiserBank> {
    let manifest = manifest.as_ref();
    let m: BankManifest = read_json(manifest)?;
    let mut models = Vec::with_capacity(m.bins.len());
    for e in &m.bins {
        let model = load_model(resolve(manifest, &e.path))?;
        let bin = SigmaBin::new(e.lo, e.hi)?;
        if model.sigma_bin != Some(bin) {
            return Err(Error::format(manifest, format!("{} was trained for a different bin", e.path.display())));
        }
        models.push(model);
    }
    DenoiserBank::new(models)
}

/// Writes `network.json` plus weights into `dir`; returns the manifest path.
pub fn save_network(net: &UnrolledNetwork, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = match &net.weights {
        Weights::PerLayer(models) => {
            let mut paths = Vec::new();
            for (i, m) in models.iter().enumerate() {
                let name = PathBuf::from(format!("layer{i}.ldw"));
                save_model(m, dir.join(&name))?;
                paths.push(name);
            }
            NetworkManifest {
                variant: net.variant,
                weight_mode: WeightMode::PerLayer,
                layers: net.layers,
                models: paths,
                bank: None,
            }
        }
        Weights::Banked(bank) => {
            save_bank(bank, dir)?;
            NetworkManifest {
                variant: net.variant,
                weight_mode: WeightMode::Banked,
                layers: net.layers,
                models: Vec::new(),
                bank: Some("bank.json".into()),
            }
        }
    };
    let path = dir.join("network.json");
    write_json(&manifest, &path)?;
    Ok(path)
}

pub fn load_network(manifest: impl AsRef<Path>) -> Result<UnrolledNetwork> {
    let manifest = manifest.as_ref();
    let m: NetworkManifest = read_json(manifest)?;
    match m.weight_mode {
        WeightMode::PerLayer => {
            if m.models.len() != m.layers {
                return Err(Error::format(manifest, format!("{} layers but {} models", m.layers, m.models.len())));
            }
            let models = m.models.iter().map(|p| load_model(resolve(manifest, p))).collect::<Result<Vec<_>>>()?;
            UnrolledNetwork::per_layer(m.variant, models)
        }
        WeightMode::Banked => {
            let bank = m.bank.ok_or_else(|| Error::format(manifest, "banked network without a bank"))?;
            UnrolledNetwork::banked(m.variant, load_bank(resolve(manifest, &bank))?, m.layers)
        }
    }
}
