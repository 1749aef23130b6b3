use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::SignalVector;

/// Reads a binary (P5) PGM, scaled to `[0, 1]` by its maxval.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<SignalVector<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes).map_err(|what| Error::format(path, what))
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<SignalVector<f64>, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary PGM (P5), found `{}`", fields[0]));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported geometry {w}x{h}, maxval {maxval}"));
    }
    pos += 1; // single whitespace after maxval
    let depth = if maxval < 256 { 1 } else { 2 };
    let data = bytes.get(pos..pos + w * h * depth).ok_or("pixel data is truncated")?;
    let scale = maxval as f64;
    let values = if depth == 1 {
        data.iter().map(|&b| b as f64 / scale).collect()
    } else {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale).collect()
    };
    SignalVector::new(h, w, values).map_err(|e| e.to_string())
}

/// 8-bit P5 PGM; values are clamped to `[0, 1]` and rounded to 255 levels.
pub fn write_pgm(path: impl AsRef<Path>, x: &SignalVector<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", x.width(), x.height()).into_bytes();
    out.extend(x.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    height: usize,
    width: usize,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Little-endian f32 pixels with a `{height, width}` JSON sidecar next to it.
pub fn read_raw(path: impl AsRef<Path>) -> Result<SignalVector<f64>> {
    let path = path.as_ref();
    let meta_path = sidecar(path);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: RawSidecar = serde_json::from_str(&meta).map_err(|e| Error::format(&meta_path, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.height * meta.width * 4 {
        return Err(Error::format(path, format!("expected {}x{} f32 pixels", meta.height, meta.width)));
    }
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    SignalVector::new(meta.height, meta.width, values)
}

pub fn write_raw(path: impl AsRef<Path>, x: &SignalVector<f64>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = x.values().iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta_path = sidecar(path);
    let mut f = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let text = serde_json::to_string(&RawSidecar { height: x.height(), width: x.width() }).expect("sidecar serializes");
    writeln!(f, "{text}").map_err(|e| Error::io(&meta_path, e))
}

/// Dispatches on extension: `.pgm`, or `.raw` / `.f32` with a sidecar.
pub fn load_image(path: impl AsRef<Path>) -> Result<SignalVector<f64>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("raw" | "f32") => read_raw(path),
        _ => Err(Error::format(path, "unknown image format (expected .pgm, .raw or .f32)")),
    }
}

pub fn save_image(path: impl AsRef<Path>, x: &SignalVector<f64>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("raw" | "f32") => write_raw(path, x),
        _ => write_pgm(path, x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let x = SignalVector::new(2, 3, vec![0.0, 1.0, 0.5, 0.25, 128.0 / 255.0, 1.0]).unwrap();
        write_pgm(&p, &x).unwrap();
        let y = read_pgm(&p).unwrap();
        assert_eq!(y.shape(), (2, 3));
        for (a, b) in x.values().iter().zip(y.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let q = dir.path().join("b.pgm");
        fs::write(&q, b"P5\n# comment\n2 1\n# more\n255\n\x00\xff").unwrap();
        assert_eq!(read_pgm(&q).unwrap().values(), &[0.0, 1.0]);
    }

    #[test]
    fn sixteen_bit_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let q = dir.path().join("c.pgm");
        fs::write(&q, b"P5 1 1 65535\n\xff\xff").unwrap();
        assert_eq!(read_pgm(&q).unwrap().values(), &[1.0]);
    }

    #[test]
    fn malformed_inputs_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let q = dir.path().join("bad.pgm");
        fs::write(&q, b"P2\n1 1\n255\n0").unwrap();
        let e = read_pgm(&q).unwrap_err().to_string();
        assert!(e.contains("bad.pgm"), "{e}");
        let e = read_pgm(dir.path().join("missing.pgm")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
        fs::write(&q, b"P5\n4 4\n255\n\x00").unwrap();
        assert!(read_pgm(&q).is_err());
    }

    #[test]
    fn raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.raw");
        let x = SignalVector::new(2, 2, vec![0.125, -3.5, 0.0009765625, 7.0]).unwrap();
        write_raw(&p, &x).unwrap();
        assert_eq!(load_image(&p).unwrap(), x);
        assert!(load_image(dir.path().join("x.png")).is_err());
    }
}
