//! State evolution: the scalar recursion predicting D-AMP's per-layer MSE.
//!
//! It needs the ground truth `x_o`, so it is a validation tool rather than
//! part of inference.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::amp::{DenoiserSelector, RecoveryTrace, TraceRecord};
use crate::error::{Error, Result};
use crate::measure::SignalVector;
use crate::rng;

/// Relative errors divide by at least this much.
pub const REL_ERR_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SEParams {
    pub x_o: SignalVector<f64>,
    /// `m / n`.
    pub delta: f64,
    pub sigma_eps: f64,
    pub layers: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl SEParams {
    pub fn new(x_o: SignalVector<f64>, delta: f64, sigma_eps: f64, layers: usize) -> Self {
        Self { x_o, delta, sigma_eps, layers, mc_samples: 8, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta {} outside (0, 1]", self.delta)));
        }
        if !(self.sigma_eps >= 0.0) {
            return Err(Error::Config("sigma_eps must be >= 0".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("at least one Monte-Carlo sample is required".into()));
        }
        if self.x_o.is_empty() {
            return Err(Error::Config("empty ground truth".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SETrace {
    /// `theta^0 ..= theta^L`.
    pub theta: Vec<f64>,
    /// Effective noise level `sigma^l` fed to layer `l`.
    pub sigma_l: Vec<f64>,
    /// Measured MSE of `x^1 ..= x^L`, when attached.
    pub empirical_mse: Option<Vec<f64>>,
}

impl SETrace {
    pub fn layers(&self) -> usize {
        self.sigma_l.len()
    }

    /// The predictions dressed as a recovery trace.
    pub fn as_recovery_trace(&self) -> RecoveryTrace {
        RecoveryTrace {
            records: (0..self.layers())
                .map(|l| TraceRecord {
                    iter: l,
                    sigma_hat: self.sigma_l[l],
                    mse: Some(self.theta[l + 1]),
                    effective_noise_std: None,
                    time_s: 0.0,
                })
                .collect(),
        }
    }

    /// Attaches the MSE column of `trace` (checked by [`se_compare`]).
    pub fn with_empirical(mut self, trace: &RecoveryTrace) -> Result<Self> {
        se_compare(&self, trace)?;
        self.empirical_mse = Some(trace.records.iter().map(|r| r.mse.expect("checked")).collect());
        Ok(self)
    }

    /// `theta^{l+1} <= (1 + tol) theta^l` for every layer.
    pub fn is_non_increasing(&self, tol: f64) -> bool {
        self.theta.windows(2).all(|w| w[1] <= (1.0 + tol) * w[0])
    }

    /// `layer,theta,sigma_l,empirical_mse,rel_err`, one row per `theta^l`.
    /// Row 0 reports the all-zero start, whose MSE is `theta^0` by definition.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,theta,sigma_l,empirical_mse,rel_err")?;
        for (l, theta) in self.theta.iter().enumerate() {
            let sigma = self.sigma_l.get(l).map(|s| format!("{s:e}")).unwrap_or_default();
            let emp = self.empirical_mse.as_ref().map(|e| if l == 0 { *theta } else { e[l - 1] });
            let (emp, rel) = match emp {
                Some(e) => (format!("{e:e}"), format!("{:e}", rel_err(*theta, e))),
                None => (String::new(), String::new()),
            };
            writeln!(w, "{l},{theta:e},{sigma},{emp},{rel}")?;
        }
        Ok(())
    }
}

fn rel_err(predicted: f64, measured: f64) -> f64 {
    (predicted - measured).abs() / measured.max(REL_ERR_FLOOR)
}

/// Runs the recursion `sigma^l = sqrt(theta^l / delta + sigma_eps^2)`,
/// `theta^{l+1} = E ||D_{sigma^l}(x_o + sigma^l g) - x_o||^2 / n`, the
/// expectation taken over `mc_samples` fresh noise draws.
pub fn se_predict<S: DenoiserSelector<f64> + ?Sized>(params: &SEParams, selector: &S) -> Result<SETrace> {
    params.validate()?;
    let x = &params.x_o;
    let n = x.len() as f64;
    let mut r = rng::stream(params.seed, "se-noise");
    let mut theta = vec![x.norm_sq() / n];
    let mut sigma_l = Vec::with_capacity(params.layers);
    for l in 0..params.layers {
        let sigma = (theta[l] / params.delta + params.sigma_eps.powi(2)).sqrt();
        let d = selector.select(sigma, l)?;
        let mut sum = 0.0;
        for _ in 0..params.mc_samples {
            let noisy = x.with_values(x.values().iter().map(|v| v + sigma * rng::normal::<f64>(&mut r)).collect());
            sum += d.denoise(&noisy, sigma)?.mse(x)?;
        }
        sigma_l.push(sigma);
        theta.push(sum / params.mc_samples as f64);
    }
    Ok(SETrace { theta, sigma_l, empirical_mse: None })
}

/// `|theta^l - mse^l| / max(mse^l, 1e-12)` for `l = 1..=L`.
pub fn se_compare(se: &SETrace, trace: &RecoveryTrace) -> Result<Vec<f64>> {
    if trace.len() != se.layers() {
        return Err(Error::dim(format!("{} predicted layers but {} recorded", se.layers(), trace.len())));
    }
    trace
        .records
        .iter()
        .enumerate()
        .map(|(l, r)| {
            let mse = r.mse.ok_or_else(|| Error::Usage("the trace carries no ground-truth MSE".into()))?;
            Ok(rel_err(se.theta[l + 1], mse))
        })
        .collect()
}

/// Per-layer MSE averaged over several runs.
pub fn mean_trace(traces: &[RecoveryTrace]) -> Result<RecoveryTrace> {
    let first = traces.first().ok_or_else(|| Error::Argument("no traces to average".into()))?;
    let mut out = first.clone();
    for t in &traces[1..] {
        if t.len() != first.len() {
            return Err(Error::dim("traces differ in length"));
        }
    }
    for (l, rec) in out.records.iter_mut().enumerate() {
        let mut mse = 0.0;
        let mut sigma = 0.0;
        for t in traces {
            mse += t.records[l].mse.ok_or_else(|| Error::Usage("the trace carries no ground-truth MSE".into()))?;
            sigma += t.records[l].sigma_hat;
        }
        rec.mse = Some(mse / traces.len() as f64);
        rec.sigma_hat = sigma / traces.len() as f64;
        rec.effective_noise_std = None;
        rec.time_s = traces.iter().map(|t| t.records[l].time_s).sum::<f64>() / traces.len() as f64;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityRow {
    /// Noise level on the 0–255 scale.
    pub sigma: f64,
    pub mse: f64,
}

/// Mean denoising MSE of the selected denoiser at each noise level of
/// `sigma_grid` (0–255 scale, ascending) over the held-out `images`.
pub fn monotonicity_probe<S: DenoiserSelector<f64> + ?Sized>(
    selector: &S,
    sigma_grid: &[f64],
    images: &[SignalVector<f64>],
    seed: u64,
) -> Result<Vec<MonotonicityRow>> {
    if sigma_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Argument("noise grid must be strictly ascending".into()));
    }
    if images.is_empty() {
        return Err(Error::Argument("no held-out images".into()));
    }
    let mut r = rng::stream(seed, "monotonicity-noise");
    sigma_grid
        .iter()
        .map(|&s255| {
            let sigma = s255 / 255.0;
            let d = selector.select(sigma, 0)?;
            let mut sum = 0.0;
            for x in images {
                let noisy = x.with_values(x.values().iter().map(|v| v + sigma * rng::normal::<f64>(&mut r)).collect());
                sum += d.denoise(&noisy, sigma)?.mse(x)?;
            }
            Ok(MonotonicityRow { sigma: s255, mse: sum / images.len() as f64 })
        })
        .collect()
}

/// `mse(sigma_{k+1}) >= mse(sigma_k) / (1 + tol)`: allows a relative dip
/// of `tol` between neighbours.
pub fn is_non_decreasing(rows: &[MonotonicityRow], tol: f64) -> bool {
    rows.windows(2).all(|w| w[1].mse * (1.0 + tol) >= w[0].mse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amp::{recover, Fixed, SolverConfig};
    use crate::denoise::{Denoiser, DenoiserModel};
    use crate::measure::{add_noise, CodedDiffractionOperator, MeasurementOperator, NoiseSpec};

    struct Oracle(SignalVector<f64>);
    impl Denoiser<f64> for Oracle {
        fn denoise(&self, _x: &SignalVector<f64>, _s: f64) -> Result<SignalVector<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Zero;
    impl Denoiser<f64> for Zero {
        fn denoise(&self, x: &SignalVector<f64>, _s: f64) -> Result<SignalVector<f64>> {
            Ok(x.scale(0.0))
        }
    }

    fn image(h: usize, w: usize) -> SignalVector<f64> {
        SignalVector::new(h, w, (0..h * w).map(|i| 0.3 + 0.4 * ((i as f64) * 0.37).sin().abs()).collect()).unwrap()
    }

    #[test]
    fn identity_grows_by_one_over_delta() {
        let x = image(64, 64);
        let p = SEParams { mc_samples: 4, ..SEParams::new(x, 0.5, 0.0, 5) };
        let se = se_predict(&p, &Fixed(DenoiserModel::identity())).unwrap();
        // Each estimate is a mean of 4 * 4096 squared normals: relative std sqrt(2 / 16384).
        let tol = 4.0 * 2.0 * (2.0f64 / 16384.0).sqrt();
        for l in 0..5 {
            let ratio = se.theta[l + 1] / se.theta[l];
            assert!((ratio - 2.0).abs() < tol, "layer {l}: ratio {ratio}");
        }
        assert_eq!(se.sigma_l[0], (se.theta[0] / 0.5).sqrt());
    }

    #[test]
    fn oracle_and_zero_denoisers() {
        let x = image(8, 8);
        let p = SEParams::new(x.clone(), 0.3, 0.1, 4);
        let se = se_predict(&p, &Fixed(Oracle(x.clone()))).unwrap();
        assert!(se.theta[1..].iter().all(|t| *t == 0.0));
        let se = se_predict(&p, &Fixed(Zero)).unwrap();
        assert!(se.theta.iter().all(|t| (*t - se.theta[0]).abs() < 1e-15));
        assert_eq!(se.theta[0], x.norm_sq() / 64.0);
    }

    #[test]
    fn own_samples_compare_perfectly() {
        let x = image(8, 8);
        let se = se_predict(&SEParams::new(x, 0.5, 0.02, 6), &Fixed(DenoiserModel::identity())).unwrap();
        let errs = se_compare(&se, &se.as_recovery_trace()).unwrap();
        assert!(errs.iter().all(|e| *e <= 1e-6));
    }

    #[test]
    fn compare_errors() {
        let x = image(4, 4);
        let se = se_predict(&SEParams::new(x, 0.5, 0.0, 3), &Fixed(DenoiserModel::identity())).unwrap();
        let mut t = se.as_recovery_trace();
        t.records.pop();
        assert!(matches!(se_compare(&se, &t), Err(Error::Dimension(_))));
        let mut t = se.as_recovery_trace();
        t.records[1].mse = None;
        assert!(matches!(se_compare(&se, &t), Err(Error::Usage(_))));
    }

    #[test]
    fn unitary_cdp_identity_first_layer() {
        // One identity layer under a unitary operator leaves x_o plus the real
        // part of A^H e; circular noise of variance s^2 contributes s^2 / 2.
        let x = image(64, 64);
        let s = 0.05;
        let op = CodedDiffractionOperator::<f64>::new((64, 64), 4096, 1).unwrap();
        let y = add_noise(&op.apply(&x).unwrap(), NoiseSpec { sigma_eps: s, seed: 2 }).unwrap();
        let cfg = SolverConfig { iters: 1, ..Default::default() };
        let (_, trace) = recover(&y, &op, &Fixed(DenoiserModel::identity()), &cfg, Some(&x)).unwrap();
        let mse = trace.records[0].mse.unwrap();
        assert!((mse / (s * s / 2.0) - 1.0).abs() < 0.05, "mse {mse}");
        let se = se_predict(&SEParams::new(x.clone(), 1.0, s, 1), &Fixed(DenoiserModel::identity())).unwrap();
        let expect = se.theta[0] + s * s;
        assert!((se.theta[1] / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn monotonicity_of_simple_denoisers() {
        let imgs = vec![image(32, 32), image(16, 16)];
        let grid = [5.0, 15.0, 30.0, 60.0];
        let rows = monotonicity_probe(&Fixed(DenoiserModel::identity()), &grid, &imgs, 1).unwrap();
        assert!(is_non_decreasing(&rows, 0.0));
        for r in &rows {
            let expect = (r.sigma / 255.0).powi(2);
            assert!((r.mse / expect - 1.0).abs() < 0.1);
        }
        assert!(monotonicity_probe(&Fixed(DenoiserModel::identity()), &[5.0, 5.0], &imgs, 1).is_err());
    }

    #[test]
    fn csv_layout() {
        let x = image(4, 4);
        let se = se_predict(&SEParams::new(x, 0.5, 0.0, 2), &Fixed(DenoiserModel::identity())).unwrap();
        let t = se.as_recovery_trace();
        let se = se.with_empirical(&t).unwrap();
        let mut buf = Vec::new();
        se.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "layer,theta,sigma_l,empirical_mse,rel_err");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].split(',').nth(2).unwrap().is_empty());
    }
}
