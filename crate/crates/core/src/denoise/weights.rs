//! Weight files: `LDAMPW1\n`, one line of JSON header, then every float of
//! every layer as little-endian `f32` in declared order (kernels, bias and,
//! for batch-normalized layers, gamma, beta, running mean, running var).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenoiserModel, DenoiserSpec, SigmaBin};
use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, BnMode, LayerParams, RunningStats};
use crate::Real;

pub const MAGIC: &[u8; 8] = b"LDAMPW1\n";

#[derive(Debug, Serialize, Deserialize)]
struct LayerHeader {
    c_in: usize,
    c_out: usize,
    batch_norm: bool,
    running_stats: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    spec: DenoiserSpec,
    sigma_bin: Option<SigmaBin>,
    bn_mode: BnMode,
    layers: Vec<LayerHeader>,
    floats: usize,
}

fn layer_floats(l: &LayerParams<Real>) -> Vec<Real> {
    let mut v = Vec::with_capacity(l.kernels.len() + 5 * l.c_out);
    v.extend_from_slice(&l.kernels);
    v.extend_from_slice(&l.bias);
    if let Some(bn) = &l.bn {
        v.extend_from_slice(&bn.gamma);
        v.extend_from_slice(&bn.beta);
        if let Some(r) = &bn.running {
            v.extend_from_slice(&r.mean);
            v.extend_from_slice(&r.var);
        }
    }
    v
}

pub fn write_model<W: Write>(model: &DenoiserModel, mut w: W) -> std::io::Result<()> {
    let blob: Vec<Real> = model.layers.iter().flat_map(layer_floats).collect();
    let header = Header {
        spec: model.spec,
        sigma_bin: model.sigma_bin,
        bn_mode: model.bn_mode,
        layers: model
            .layers
            .iter()
            .map(|l| LayerHeader {
                c_in: l.c_in,
                c_out: l.c_out,
                batch_norm: l.bn.is_some(),
                running_stats: l.bn.as_ref().is_some_and(|b| b.running.is_some()),
            })
            .collect(),
        floats: blob.len(),
    };
    w.write_all(MAGIC)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for v in blob {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_model<R: BufRead>(mut r: R, path: &Path) -> Result<DenoiserModel> {
    let bad = |what: &str| Error::format(path, what);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("missing LDAMPW1 magic"));
    }
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| bad(&format!("header: {e}")))?;

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != header.floats * 4 {
        return Err(bad(&format!("expected {} floats, found {} bytes", header.floats, bytes.len())));
    }
    let mut floats = bytes.chunks_exact(4).map(|c| Real::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize| -> Result<Vec<Real>> {
        let v: Vec<Real> = floats.by_ref().take(n).collect();
        if v.len() != n {
            return Err(bad("weight blob too short for declared layers"));
        }
        Ok(v)
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let kernels = take(9 * lh.c_in * lh.c_out)?;
        let bias = take(lh.c_out)?;
        let bn = if lh.batch_norm {
            let gamma = take(lh.c_out)?;
            let beta = take(lh.c_out)?;
            let running = if lh.running_stats {
                Some(RunningStats { mean: take(lh.c_out)?, var: take(lh.c_out)? })
            } else {
                None
            };
            let mut bn = BatchNorm::new(lh.c_out);
            bn.gamma = gamma;
            bn.beta = beta;
            bn.running = running;
            Some(bn)
        } else {
            None
        };
        layers.push(LayerParams { c_in: lh.c_in, c_out: lh.c_out, kernels, bias, bn });
    }
    let model = DenoiserModel { spec: header.spec, layers, sigma_bin: header.sigma_bin, bn_mode: header.bn_mode };
    model.validate().map_err(|e| bad(&e.to_string()))?;
    Ok(model)
}

pub fn save_model(model: &DenoiserModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_model(model, BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DenoiserModel> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(BufReader::new(f), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::CnnArch;

    #[test]
    fn roundtrip_preserves_everything() {
        let arch = CnnArch { depth: 4, width: 3, channels: 1, batch_norm: true };
        let mut m = DenoiserModel::init(DenoiserSpec::Cnn(arch), 5)
            .unwrap()
            .with_sigma_bin(SigmaBin::new(20.0, 40.0).unwrap());
        m.layers[1].bn.as_mut().unwrap().running.as_mut().unwrap().var[0] = 2.5;
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert!(buf.starts_with(MAGIC));
        let back = read_model(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let m = DenoiserModel::init(DenoiserSpec::Cnn(CnnArch { depth: 4, width: 2, channels: 1, batch_norm: false }), 1)
            .unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_model(&buf[..], Path::new("mem")), Err(Error::Format { .. })));
        assert!(read_model(&b"NOTMAGIC{}"[..], Path::new("mem")).is_err());
    }

    #[test]
    fn analytic_models_have_empty_blob() {
        let m = DenoiserModel::identity();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(&buf[..], Path::new("mem")).unwrap(), m);
    }
}
