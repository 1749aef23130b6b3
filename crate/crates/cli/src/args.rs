use std::fs;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, Parser, Subcommand};
use ldamp::amp::Variant;
use ldamp::eval::Method;
use ldamp::measure::OperatorKind;
use ldamp::unrolled::Regime;
use ldamp::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Parser)]
#[command(
    name = "ldamp",
    version,
    about = "Compressive image recovery with D-AMP, D-IT and learned unrolled networks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Global {
    /// Base seed; matrices, noise, probes, splits and initializations use
    /// named streams derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    /// Worker threads for benchmark cells.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// JSON object of flag values (keys are flag names with `_`); flags given
    /// on the command line take precedence.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Write every wall time as 0 so repeated runs are byte-identical.
    #[arg(long, global = true)]
    pub no_timing: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut images into training patches.
    Dataset(DatasetArgs),
    /// Train an unrolled network or a denoiser bank.
    Train(TrainArgs),
    /// Measure an image and recover it.
    Recover(RecoverArgs),
    /// Compare the state-evolution prediction with measured recoveries.
    Se(SeArgs),
    /// PSNR and run-time sweep over methods, rates and images.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DatasetArgs {
    /// Directory of .pgm / .raw images.
    #[arg(long, required_unless_present = "config")]
    pub images: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    pub patch_size: usize,
    /// Defaults to the patch size.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Random flips and rotations plus rescaled copies (training split only).
    #[arg(long)]
    pub augment: bool,
    /// Train, validation and test fractions of the images.
    #[arg(long, value_delimiter = ',', default_value = "0.8,0.1,0.1")]
    pub split: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Dataset manifest (or the directory holding dataset.json).
    #[arg(long, required_unless_present = "config")]
    pub dataset: Option<PathBuf>,
    /// e2e, lbl or dbd.
    #[arg(long, default_value = "lbl")]
    pub regime: Regime,
    /// damp or dit.
    #[arg(long, default_value = "damp")]
    pub variant: Variant,
    #[arg(long, default_value_t = 10)]
    pub layers: usize,
    /// Convolution layers per denoiser.
    #[arg(long, default_value_t = 6)]
    pub depth: usize,
    /// Feature maps per hidden layer.
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long)]
    pub no_batch_norm: bool,
    /// Sampling rate m/n of the training problems.
    #[arg(long, default_value_t = 0.2)]
    pub rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma_eps: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Learning rates, each used until validation stops improving.
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.0001,0.00001")]
    pub lr: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    pub patience: usize,
    /// `default` or ascending bin edges on the 0-255 scale starting at 0.
    #[arg(long, default_value = "default")]
    pub bins: String,
    /// Divergence probes per estimate.
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
    /// Keep one measurement matrix for the whole run.
    #[arg(long)]
    pub fixed_matrix: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ModelArgs {
    /// dit, damp, ldit or ldamp; inferred from the model when omitted.
    #[arg(long)]
    pub method: Option<Method>,
    /// Analytic denoiser: identity, blur or dct.
    #[arg(long, conflicts_with = "model")]
    pub denoiser: Option<String>,
    /// Denoiser weights (.ldw), bank manifest or network manifest.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RecoverArgs {
    /// Image to measure.
    #[arg(long, required_unless_present = "config")]
    pub input: Option<PathBuf>,
    /// Reference image for MSE and PSNR.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.2)]
    pub rate: f64,
    /// gaussian or cdp.
    #[arg(long, default_value = "gaussian")]
    pub op: OperatorKind,
    /// Defaults to the network depth, or 10.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub sigma_eps: f64,
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
    /// Output image name inside --out-dir (.pgm or .raw).
    #[arg(long, default_value = "recovered.pgm")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SeArgs {
    #[arg(long, required_unless_present = "config")]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Sampling rate m/n.
    #[arg(long, default_value_t = 0.1)]
    pub delta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma_eps: f64,
    /// Defaults to the network depth, or 10.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Noise draws per predicted layer.
    #[arg(long, default_value_t = 8)]
    pub mc_samples: usize,
    /// Measured recoveries averaged for the empirical column; 0 skips them.
    #[arg(long, default_value_t = 8)]
    pub trials: usize,
    #[arg(long, default_value = "gaussian")]
    pub op: OperatorKind,
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    /// METHOD=MODEL, repeatable; MODEL is a denoiser name or a model path.
    #[arg(long = "method", required_unless_present = "config")]
    pub methods: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    /// Image files or directories.
    #[arg(long, required_unless_present = "config")]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value = "gaussian")]
    pub op: OperatorKind,
    /// Seeds per cell, counting up from --seed.
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    /// Iterations for methods without a fixed depth.
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.0)]
    pub sigma_eps: f64,
    #[arg(long, default_value_t = 1)]
    pub probes: usize,
}

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("arguments serialize") {
        Value::Object(m) => m,
        _ => unreachable!("argument structs serialize to objects"),
    }
}

fn from_map<T: DeserializeOwned>(m: &Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m.clone()))
        .map_err(|e| Error::Usage(format!("bad configuration value: {e}")))
}

/// Merges `--config` into the parsed flags (explicit flags win) and returns
/// the resolved flat configuration alongside the typed records.
pub fn resolve<T: Serialize + DeserializeOwned>(
    global: Global,
    args: T,
    command: &str,
    matches: &ArgMatches,
) -> Result<(Global, T, Value)> {
    let mut flat = Map::new();
    flat.insert("command".into(), Value::String(command.into()));
    flat.extend(to_map(&global));
    flat.extend(to_map(&args));
    if let Some(path) = &global.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Usage(format!("{}: not valid JSON: {e}", path.display())))?;
        let Value::Object(file) = file else {
            return Err(Error::Usage(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        };
        for (key, value) in file {
            if key == "command" {
                if value != Value::String(command.into()) {
                    return Err(Error::Usage(format!(
                        "{} is a configuration for {value}",
                        path.display()
                    )));
                }
                continue;
            }
            if !flat.contains_key(&key) {
                return Err(Error::Usage(format!(
                    "{}: unknown option `{key}`",
                    path.display()
                )));
            }
            if matches.value_source(&key) != Some(ValueSource::CommandLine) {
                flat.insert(key, value);
            }
        }
    }
    let mut global: Global = from_map(&flat)?;
    global.config = None;
    let args: T = from_map(&flat)?;
    Ok((global, args, Value::Object(flat)))
}
