//! Evaluation: PSNR, image files, patch datasets, synthetic test images and
//! the benchmark sweep.

mod bench;
mod dataset;
mod image;
pub mod synth;

use crate::error::{Error, Result};
use crate::measure::SignalVector;
use crate::scalar::Scalar;

pub use bench::{run_benchmark, BenchConfig, BenchResult, BenchRow, CellMean, Method, MethodModel, MethodSpec, ModelRef};
pub use dataset::{
    build_dataset, build_dataset_from_images, extract_patches, load_dataset, save_dataset, Augment, DatasetConfig,
    PatchDataset, Split,
};
pub use image::{load_image, read_pgm, read_raw, save_image, write_pgm, write_raw};

/// `10 log10(peak^2 / mse)`; `+inf` when the images are identical.
pub fn psnr<T: Scalar>(x_hat: &SignalVector<T>, x_o: &SignalVector<T>, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Argument(format!("peak {peak} must be positive")));
    }
    if x_hat.shape() != x_o.shape() {
        return Err(Error::Dimension(format!("image shapes {:?} and {:?} differ", x_hat.shape(), x_o.shape())));
    }
    let mse = x_hat.mse(x_o)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() })
}

/// Fixed-point dB value, or `inf` for an exact match.
pub fn format_psnr(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = SignalVector::new(2, 2, vec![0.0f64, 10.0, 20.0, 30.0]).unwrap();
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(psnr(&a, &a, 255.0).unwrap()), "inf");
        let b = a.with_values(a.values().iter().map(|v| v + 255.0).collect());
        assert_eq!(psnr(&b, &a, 255.0).unwrap(), 0.0);
        let c = a.with_values(a.values().iter().map(|v| v + 1.0).collect());
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&c, &a, 255.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 48.1308).abs() < 5e-5);
        assert!(psnr(&a, &SignalVector::zeros(1, 4), 255.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }
}
