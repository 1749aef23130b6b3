use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ldamp::amp::{recover as run_recovery, RecoveryTrace, SolverConfig};
use ldamp::denoise::{CnnArch, DenoiserSpec, ProbeConfig, SigmaBin};
use ldamp::eval::{
    build_dataset, format_psnr, load_dataset, load_image, psnr, run_benchmark, save_dataset,
    save_image, Augment, BenchConfig, DatasetConfig, Method, MethodModel, MethodSpec, ModelRef,
    Split,
};
use ldamp::measure::{
    add_noise, MeasurementOperator, NoiseSpec, OperatorKind, OperatorSpec, SignalVector,
};
use ldamp::rng::stream_seed;
use ldamp::se::{mean_trace, se_predict, SEParams};
use ldamp::unrolled::{
    default_bins, save_bank, save_network, train_denoiser_by_denoiser, train_end_to_end,
    train_layer_by_layer, Regime, TrainConfig,
};
use ldamp::{Error, Result};
use serde_json::{json, Value};

use crate::args::{BenchArgs, DatasetArgs, Global, ModelArgs, RecoverArgs, SeArgs, TrainArgs};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    f(&mut w).map_err(io)?;
    w.flush().map_err(io)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    write_file(path, |w| {
        writeln!(
            w,
            "{}",
            serde_json::to_string_pretty(value).expect("json serializes")
        )
    })
}

/// Creates the output directory and records the resolved configuration.
fn prepare(g: &Global, command: &str, resolved: &Value) -> Result<()> {
    create_dir(&g.out_dir)?;
    write_json(&g.out_dir.join(format!("{command}.config.json")), resolved)
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Usage(format!("missing --{flag}")))
}

fn probe(probes: usize) -> ProbeConfig {
    ProbeConfig {
        probes,
        ..ProbeConfig::default()
    }
}

pub fn dataset(g: &Global, a: &DatasetArgs, resolved: &Value) -> Result<()> {
    let images = required(&a.images, "images")?;
    let split: [f64; 3] = a.split.as_slice().try_into().map_err(|_| {
        Error::Usage(format!(
            "--split takes three fractions, got {}",
            a.split.len()
        ))
    })?;
    let cfg = DatasetConfig {
        patch_size: a.patch_size,
        stride: a.stride.unwrap_or(a.patch_size),
        augment: if a.augment {
            Augment::all()
        } else {
            Augment::default()
        },
        split,
        seed: g.seed,
    };
    prepare(g, "dataset", resolved)?;
    let ds = build_dataset(images, &cfg)?;
    let manifest = save_dataset(&ds, &g.out_dir)?;
    println!(
        "{} patches (train {}, val {}, test {}) -> {}",
        ds.splits.len(),
        ds.count(Split::Train),
        ds.count(Split::Val),
        ds.count(Split::Test),
        manifest.display()
    );
    Ok(())
}

fn parse_bins(spec: &str) -> Result<Vec<SigmaBin>> {
    if spec == "default" {
        return Ok(default_bins());
    }
    let edges = spec
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad bin edge `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if edges.len() < 2 {
        return Err(Error::Usage("--bins needs at least two edges".into()));
    }
    edges
        .windows(2)
        .map(|w| SigmaBin::new(w[0], w[1]))
        .collect()
}

fn write_curve(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{header}")?;
        for r in rows {
            writeln!(w, "{r}")?;
        }
        Ok(())
    })
}

pub fn train(g: &Global, a: &TrainArgs, resolved: &Value) -> Result<()> {
    let manifest = required(&a.dataset, "dataset")?;
    let manifest = if manifest.is_dir() {
        manifest.join("dataset.json")
    } else {
        manifest.clone()
    };
    let cfg = TrainConfig {
        regime: a.regime,
        variant: a.variant,
        layers: a.layers,
        arch: CnnArch {
            depth: a.depth,
            width: a.width,
            channels: 1,
            batch_norm: !a.no_batch_norm,
        },
        sampling_rate: a.rate,
        sigma_eps: a.sigma_eps,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr_rates: a.lr.clone(),
        patience: a.patience,
        seed: g.seed,
        fresh_matrix_per_batch: !a.fixed_matrix,
        probe: probe(a.probes),
        bins: parse_bins(&a.bins)?,
    };
    cfg.validate()?;
    let ds = load_dataset(&manifest)?;
    let train = ds.split(Split::Train);
    if train.batch() == 0 {
        return Err(Error::Config(format!(
            "{}: no training patches",
            manifest.display()
        )));
    }
    let val = (ds.count(Split::Val) > 0).then(|| ds.split(Split::Val));
    prepare(g, "train", resolved)?;
    let out = &g.out_dir;
    match cfg.regime {
        Regime::DenoiserByDenoiser => {
            let trained = train_denoiser_by_denoiser(&train, val.as_ref(), &cfg)?;
            let path = save_bank(&trained.bank, out)?;
            let runs = &trained.runs;
            write_curve(
                &out.join("loss.csv"),
                "bin,step,loss",
                runs.iter().enumerate().flat_map(|(b, r)| {
                    r.loss_curve
                        .iter()
                        .enumerate()
                        .map(move |(s, l)| format!("{b},{s},{l:e}"))
                }),
            )?;
            write_curve(
                &out.join("val.csv"),
                "bin,epoch,val_mse",
                runs.iter().enumerate().flat_map(|(b, r)| {
                    r.val_curve
                        .iter()
                        .enumerate()
                        .map(move |(e, l)| format!("{b},{e},{l:e}"))
                }),
            )?;
            println!("{} denoisers -> {}", trained.bank.len(), path.display());
        }
        Regime::EndToEnd | Regime::LayerByLayer => {
            let trained = if cfg.regime == Regime::EndToEnd {
                train_end_to_end(&train, val.as_ref(), &cfg)?
            } else {
                train_layer_by_layer(&train, val.as_ref(), &cfg)?
            };
            for (k, stage) in trained.stages.iter().enumerate() {
                save_network(stage, out.join(format!("stage{}", k + 1)))?;
            }
            let path = save_network(&trained.network, out)?;
            write_curve(
                &out.join("loss.csv"),
                "step,loss",
                trained
                    .loss_curve
                    .iter()
                    .enumerate()
                    .map(|(s, l)| format!("{s},{l:e}")),
            )?;
            write_curve(
                &out.join("val.csv"),
                "epoch,val_mse",
                trained
                    .val_curve
                    .iter()
                    .enumerate()
                    .map(|(e, l)| format!("{e},{l:e}")),
            )?;
            println!(
                "{}-layer {} network -> {}",
                trained.network.layers(),
                cfg.variant,
                path.display()
            );
        }
    }
    Ok(())
}

fn method_spec(m: &ModelArgs) -> Result<MethodSpec> {
    let model = match (&m.denoiser, &m.model) {
        (Some(name), None) => ModelRef::Analytic(
            DenoiserSpec::from_name(name)
                .ok_or_else(|| Error::Usage(format!("unknown denoiser `{name}`")))?,
        ),
        (None, Some(path)) => ModelRef::Path(path.clone()),
        _ => {
            return Err(Error::Usage(
                "exactly one of --denoiser or --model is required".into(),
            ))
        }
    };
    let method = m.method.unwrap_or(match &model {
        ModelRef::Path(p) if p.extension().is_some_and(|e| e == "json") => Method::Ldamp,
        _ => Method::Damp,
    });
    Ok(MethodSpec { method, model })
}

/// Depth from the model when it fixes one; a conflicting request is a
/// dimension error.
fn depth(model: &MethodModel, requested: Option<usize>) -> Result<usize> {
    match (model.layers(), requested) {
        (Some(l), Some(r)) if l != r => Err(Error::Dimension(format!(
            "network has {l} layers, {r} requested"
        ))),
        (Some(l), _) => Ok(l),
        (None, r) => Ok(r.unwrap_or(10)),
    }
}

struct Problem {
    op: ldamp::measure::Operator<f64>,
    y: ldamp::measure::MeasurementVector<f64>,
}

fn measure(
    x: &SignalVector<f64>,
    kind: OperatorKind,
    rate: f64,
    sigma_eps: f64,
    seed: u64,
    tag: &str,
) -> Result<Problem> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Usage(format!("sampling rate {rate} outside (0, 1]")));
    }
    let op = OperatorSpec::for_image(
        kind,
        x.shape(),
        rate,
        stream_seed(seed, &format!("{tag}matrix")),
    )
    .build()?;
    let y = add_noise(
        &op.apply(x)?,
        NoiseSpec {
            sigma_eps,
            seed: stream_seed(seed, &format!("{tag}noise")),
        },
    )?;
    Ok(Problem { op, y })
}

pub fn recover(g: &Global, a: &RecoverArgs, resolved: &Value) -> Result<()> {
    let input = load_image(required(&a.input, "input")?)?;
    let truth = a.truth.as_ref().map(load_image).transpose()?;
    let spec = method_spec(&a.model)?;
    let model = MethodModel::load(&spec)?;
    let solver = SolverConfig {
        iters: depth(&model, a.iters)?,
        variant: spec.method.variant(),
        probe: probe(a.probes),
        seed: stream_seed(g.seed, "probe"),
        record_trace: true,
    };
    let p = measure(&input, a.op, a.rate, a.sigma_eps, g.seed, "")?;
    if let Some(t) = &truth {
        p.op.check_signal(t)?;
    }
    prepare(g, "recover", resolved)?;
    let (x, trace) = run_recovery(&p.y, &p.op, model.selector(), &solver, truth.as_ref())?;
    let output = g.out_dir.join(&a.output);
    save_image(&output, &x)?;
    let trace_path = g.out_dir.join("trace.csv");
    write_file(&trace_path, |w| trace.write_csv(w, !g.no_timing))?;
    let mut summary = json!({
        "method": spec.method.to_string(),
        "iters": solver.iters,
        "m": p.op.m(),
        "n": p.op.n(),
        "output": output,
        "trace": trace_path,
    });
    if let Some(t) = &truth {
        // PSNR of the image as written, so 8-bit output is scored as stored.
        let db = psnr(&load_image(&output)?, t, 1.0)?;
        summary["psnr_db"] = Value::String(format_psnr(db));
    }
    write_json(&g.out_dir.join("recover.json"), &summary)?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("json serializes")
    );
    Ok(())
}

pub fn se(g: &Global, a: &SeArgs, resolved: &Value) -> Result<()> {
    let truth = load_image(required(&a.truth, "truth")?)?;
    let spec = method_spec(&a.model)?;
    let model = MethodModel::load(&spec)?;
    let layers = depth(&model, a.layers)?;
    let params = SEParams {
        x_o: truth.clone(),
        delta: a.delta,
        sigma_eps: a.sigma_eps,
        layers,
        mc_samples: a.mc_samples,
        seed: stream_seed(g.seed, "se"),
    };
    params.validate()?;
    prepare(g, "se", resolved)?;
    let mut se = se_predict(&params, model.selector())?;
    if a.trials > 0 {
        let traces = (0..a.trials)
            .map(|t| {
                let p = measure(
                    &truth,
                    a.op,
                    a.delta,
                    a.sigma_eps,
                    g.seed,
                    &format!("trial{t}-"),
                )?;
                let solver = SolverConfig {
                    iters: layers,
                    variant: spec.method.variant(),
                    probe: probe(a.probes),
                    seed: stream_seed(g.seed, &format!("trial{t}-probe")),
                    record_trace: true,
                };
                Ok(run_recovery(&p.y, &p.op, model.selector(), &solver, Some(&truth))?.1)
            })
            .collect::<Result<Vec<RecoveryTrace>>>()?;
        se = se.with_empirical(&mean_trace(&traces)?)?;
    }
    let path = g.out_dir.join("se.csv");
    write_file(&path, |w| se.write_csv(w))?;
    println!("{} layers -> {}", se.layers(), path.display());
    Ok(())
}

fn image_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .is_some_and(|e| e == "pgm" || e == "raw" || e == "f32")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn bench(g: &Global, a: &BenchArgs, resolved: &Value) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|s| s.parse())
        .collect::<Result<Vec<MethodSpec>>>()?;
    let images = image_files(&a.images)?
        .into_iter()
        .map(|p| {
            Ok((
                p.file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                load_image(&p)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = BenchConfig {
        methods,
        rates: a.rates.clone(),
        op: a.op,
        seeds: (0..a.trials).map(|t| g.seed + t).collect(),
        iters: a.iters,
        sigma_eps: a.sigma_eps,
        probe: probe(a.probes),
        threads: g.threads,
        timing: !g.no_timing,
    };
    cfg.validate()?;
    prepare(g, "bench", resolved)?;
    let result = run_benchmark(&cfg, &images)?;
    let path = g.out_dir.join("bench.csv");
    write_file(&path, |w| result.write_csv(w))?;
    for spec in &cfg.methods {
        for &rate in &cfg.rates {
            if let Some(db) = result.mean_psnr(spec.method, rate) {
                println!(
                    "{:<6} rate {rate:<6} mean PSNR {} dB",
                    spec.method,
                    format_psnr(db)
                );
            }
        }
    }
    println!("{} rows -> {}", result.rows.len(), path.display());
    Ok(())
}
