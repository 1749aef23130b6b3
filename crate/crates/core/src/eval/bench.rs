use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{format_psnr, psnr};
use crate::amp::{recover, DenoiserSelector, Fixed, SolverConfig, Variant};
use crate::denoise::{load_model, DenoiserModel, DenoiserSpec, ProbeConfig};
use crate::error::{Error, Result};
use crate::measure::{add_noise, MeasurementOperator, NoiseSpec, OperatorKind, OperatorSpec, SignalVector};
use crate::rng::stream_seed;
use crate::unrolled::{load_bank, load_network, DenoiserBank, UnrolledNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Dit,
    Damp,
    Ldit,
    Ldamp,
}

impl Method {
    pub fn variant(self) -> Variant {
        match self {
            Method::Dit | Method::Ldit => Variant::Dit,
            Method::Damp | Method::Ldamp => Variant::Damp,
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Ldit | Method::Ldamp)
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dit" => Ok(Method::Dit),
            "damp" => Ok(Method::Damp),
            "ldit" => Ok(Method::Ldit),
            "ldamp" => Ok(Method::Ldamp),
            other => Err(Error::Argument(format!("unknown method '{other}'"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Dit => "dit",
            Method::Damp => "damp",
            Method::Ldit => "ldit",
            Method::Ldamp => "ldamp",
        })
    }
}

/// Where a method's denoiser comes from.
///
/// A path may name a single model (`.ldw`), a bank manifest or an unrolled
/// network manifest. Learned methods need a network or a bank; a bank is
/// unrolled to `iters` layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelRef {
    Analytic(DenoiserSpec),
    Path(PathBuf),
}

impl FromStr for ModelRef {
    type Err = Error;
    /// An analytic denoiser name, otherwise a path.
    fn from_str(s: &str) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::Argument("empty model reference".into()));
        }
        Ok(DenoiserSpec::from_name(s).map_or_else(|| ModelRef::Path(s.into()), ModelRef::Analytic))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    pub model: ModelRef,
}

impl FromStr for MethodSpec {
    type Err = Error;
    /// `method=model`, e.g. `damp=dct` or `ldamp=runs/net/network.json`.
    fn from_str(s: &str) -> Result<Self> {
        let (method, model) =
            s.split_once('=').ok_or_else(|| Error::Argument(format!("expected METHOD=MODEL, found '{s}'")))?;
        Ok(MethodSpec { method: method.parse()?, model: model.parse()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub methods: Vec<MethodSpec>,
    pub rates: Vec<f64>,
    pub op: OperatorKind,
    pub seeds: Vec<u64>,
    /// Iterations for D-IT/D-AMP and bank-backed learned methods.
    pub iters: usize,
    pub sigma_eps: f64,
    pub probe: ProbeConfig,
    /// Worker threads over benchmark cells.
    pub threads: usize,
    /// Record wall times; when off every time is written as 0.
    pub timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            methods: Vec::new(),
            rates: Vec::new(),
            op: OperatorKind::Gaussian,
            seeds: vec![0],
            iters: 10,
            sigma_eps: 0.0,
            probe: ProbeConfig::default(),
            threads: 1,
            timing: true,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.rates.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::Config(format!("sampling rate {r} outside (0, 1]")));
        }
        if self.iters == 0 {
            return Err(Error::Config("iteration count must be at least 1".into()));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::Config(format!("noise level {} must be >= 0", self.sigma_eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub rate: f64,
    pub image: String,
    pub seed: u64,
    /// `+inf` for an exact reconstruction.
    pub psnr_db: f64,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMean {
    pub method: Method,
    pub rate: f64,
    pub image: String,
    pub psnr_db: f64,
    pub time_s: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
}

impl BenchResult {
    /// Means over seeds for every (method, rate, image) cell.
    pub fn cell_means(&self) -> Vec<CellMean> {
        let mut out: Vec<CellMean> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(c) if c.method == r.method && c.rate == r.rate && c.image == r.image => {
                    c.psnr_db += r.psnr_db;
                    c.time_s += r.time_s;
                    c.seeds += 1;
                }
                _ => out.push(CellMean {
                    method: r.method,
                    rate: r.rate,
                    image: r.image.clone(),
                    psnr_db: r.psnr_db,
                    time_s: r.time_s,
                    seeds: 1,
                }),
            }
        }
        for c in &mut out {
            c.psnr_db /= c.seeds as f64;
            c.time_s /= c.seeds as f64;
        }
        out
    }

    /// Mean PSNR of `method` at `rate` over all images and seeds.
    pub fn mean_psnr(&self, method: Method, rate: f64) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method && r.rate == rate).map(|r| r.psnr_db).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// `method,rate,image,seed,psnr_db,time_s`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "method,rate,image,seed,psnr_db,time_s")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{:.6}", r.method, r.rate, r.image, r.seed, format_psnr(r.psnr_db), r.time_s)?;
        }
        Ok(())
    }
}

/// A method's denoiser, loaded once ahead of recovery.
pub enum MethodModel {
    Single(Fixed<Arc<DenoiserModel>>),
    Bank(DenoiserBank),
    Network(UnrolledNetwork),
}

impl MethodModel {
    /// Loads and checks the model against the method: D-IT/D-AMP take a
    /// denoiser or bank, LDIT/LDAMP a network of the same variant or a bank.
    /// Missing files are configuration errors.
    pub fn load(spec: &MethodSpec) -> Result<Self> {
        let loaded = match &spec.model {
            ModelRef::Analytic(s) => MethodModel::Single(Fixed(Arc::new(DenoiserModel::analytic(*s)?))),
            ModelRef::Path(p) => {
                if !p.is_file() {
                    return Err(Error::Config(format!("{}: model for {} not found", p.display(), spec.method)));
                }
                if p.extension().is_some_and(|e| e == "json") {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    let value: serde_json::Value =
                        serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?;
                    if value.get("weight_mode").is_some() {
                        MethodModel::Network(load_network(p)?)
                    } else {
                        MethodModel::Bank(load_bank(p)?)
                    }
                } else {
                    MethodModel::Single(Fixed(Arc::new(load_model(p)?)))
                }
            }
        };
        match (&loaded, spec.method.is_learned()) {
            (MethodModel::Network(n), true) if n.variant != spec.method.variant() => Err(Error::Config(format!(
                "{} needs a {} network, found {}",
                spec.method,
                spec.method.variant(),
                n.variant
            ))),
            (MethodModel::Network(_), false) => {
                Err(Error::Config(format!("{} takes a denoiser, not a network", spec.method)))
            }
            (MethodModel::Single(_), true) => {
                Err(Error::Config(format!("{} needs a trained network or denoiser bank", spec.method)))
            }
            _ => Ok(loaded),
        }
    }

    pub fn selector(&self) -> &dyn DenoiserSelector<f64> {
        match self {
            MethodModel::Single(d) => d,
            MethodModel::Bank(b) => b,
            MethodModel::Network(n) => n,
        }
    }

    /// Depth fixed by the model, if any.
    pub fn layers(&self) -> Option<usize> {
        match self {
            MethodModel::Network(n) => Some(n.layers()),
            _ => None,
        }
    }
}

struct Cell {
    method: usize,
    rate: f64,
    image: usize,
    seed: u64,
}

/// One problem per (rate, image, seed), shared by all methods; each method's
/// wall time covers only its recovery call.
pub fn run_benchmark(config: &BenchConfig, images: &[(String, SignalVector<f64>)]) -> Result<BenchResult> {
    config.validate()?;
    let models = config.methods.iter().map(MethodModel::load).collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for mi in 0..config.methods.len() {
        for &rate in &config.rates {
            for ii in 0..images.len() {
                for &seed in &config.seeds {
                    cells.push(Cell { method: mi, rate, image: ii, seed });
                }
            }
        }
    }
    let run = |c: &Cell| -> Result<BenchRow> {
        let (name, x_o) = &images[c.image];
        let spec = &config.methods[c.method];
        let tag = format!("{name}/{}", c.rate);
        let op = OperatorSpec::for_image(config.op, x_o.shape(), c.rate, stream_seed(c.seed, &format!("bench-matrix/{tag}")))
            .build::<f64>()?;
        let y = add_noise(
            &op.apply(x_o)?,
            NoiseSpec { sigma_eps: config.sigma_eps, seed: stream_seed(c.seed, &format!("bench-noise/{tag}")) },
        )?;
        let loaded = &models[c.method];
        let iters = loaded.layers().unwrap_or(config.iters);
        let solver = SolverConfig {
            iters,
            variant: spec.method.variant(),
            probe: config.probe,
            seed: c.seed,
            record_trace: false,
        };
        let start = Instant::now();
        let (x, _) = recover(&y, &op, loaded.selector(), &solver, None)?;
        let time_s = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        Ok(BenchRow { method: spec.method, rate: c.rate, image: name.clone(), seed: c.seed, psnr_db: psnr(&x, x_o, 1.0)?, time_s })
    };
    let threads = config.threads.max(1).min(cells.len().max(1));
    let mut rows = if threads == 1 {
        cells.iter().map(run).collect::<Result<Vec<_>>>()?
    } else {
        let chunks: Vec<Result<Vec<BenchRow>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let cells = &cells;
                    let run = &run;
                    s.spawn(move || cells.iter().skip(t).step_by(threads).map(run).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("benchmark worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(cells.len());
        for c in chunks {
            all.extend(c?);
        }
        all
    };
    // Canonical order: method, rate, image, seed.
    rows.sort_by(|a, b| {
        a.method.cmp(&b.method).then(a.rate.total_cmp(&b.rate)).then(a.image.cmp(&b.image)).then(a.seed.cmp(&b.seed))
    });
    Ok(BenchResult { rows })
}
