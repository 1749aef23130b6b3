//! D-IT and D-AMP solvers.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::denoise::{mc_divergence_with, Denoiser, ProbeConfig};
use crate::error::{Error, Result};
use crate::measure::{MeasurementOperator, MeasurementVector, SignalVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dit,
    #[default]
    Damp,
}

impl Variant {
    /// Multiplier on `||z|| / sqrt(m)` used as the noise estimate.
    pub fn sigma_scale(self) -> f64 {
        match self {
            Variant::Dit => 2.0,
            Variant::Damp => 1.0,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dit" | "ldit" => Ok(Variant::Dit),
            "damp" | "ldamp" => Ok(Variant::Damp),
            _ => Err(Error::Argument(format!("unknown variant `{s}` (expected dit or damp)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dit => "dit",
            Variant::Damp => "damp",
        })
    }
}

/// Picks the denoiser applied at a given iteration.
pub trait DenoiserSelector<T: Scalar>: Send + Sync {
    fn select(&self, sigma_hat: f64, iter: usize) -> Result<&dyn Denoiser<T>>;
}

/// The same denoiser at every iteration.
#[derive(Debug, Clone)]
pub struct Fixed<D>(pub D);

impl<T: Scalar, D: Denoiser<T>> DenoiserSelector<T> for Fixed<D> {
    fn select(&self, _sigma_hat: f64, _iter: usize) -> Result<&dyn Denoiser<T>> {
        Ok(&self.0)
    }
}

impl<T: Scalar, S: DenoiserSelector<T> + ?Sized> DenoiserSelector<T> for &S {
    fn select(&self, sigma_hat: f64, iter: usize) -> Result<&dyn Denoiser<T>> {
        (**self).select(sigma_hat, iter)
    }
}

/// Iterate `t` of the solver. `x` is `x^t`; `z`, `b` and `sigma_hat` are from
/// the step that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryState<T: Scalar> {
    pub x: SignalVector<T>,
    pub z: MeasurementVector<T>,
    pub b: MeasurementVector<T>,
    pub sigma_hat: f64,
    pub iter: usize,
    /// Divergence of the last denoiser call, feeding the next Onsager term.
    pub div: f64,
    /// Last denoiser input `x + Re(A^H z)`.
    pub pseudo_data: SignalVector<T>,
}

impl<T: Scalar> RecoveryState<T> {
    /// `x^0 = 0`, `z = b = 0`.
    pub fn initial<O: MeasurementOperator<T> + ?Sized>(op: &O) -> Self {
        let (h, w) = op.shape();
        let zero = op.zero_measurement();
        Self {
            x: SignalVector::zeros(h, w),
            z: zero.clone(),
            b: zero,
            sigma_hat: 0.0,
            iter: 0,
            div: 0.0,
            pseudo_data: SignalVector::zeros(h, w),
        }
    }
}

/// `z_prev * div / m`.
pub fn onsager<T: Scalar>(z_prev: &MeasurementVector<T>, div: f64, m: usize) -> MeasurementVector<T> {
    z_prev.scale(T::of(div / m as f64))
}

/// Probe settings shared by every iteration of one run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepConfig {
    pub probe: ProbeConfig,
    /// Iteration `t` probes with seed `probe_seed ^ t`.
    pub probe_seed: u64,
}

fn finite(iter: usize, what: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Numeric { iter, what: what.to_string() })
    }
}

fn iterate<T: Scalar, O, S>(
    variant: Variant,
    state: &RecoveryState<T>,
    op: &O,
    y: &MeasurementVector<T>,
    selector: &S,
    step: StepConfig,
) -> Result<RecoveryState<T>>
where
    O: MeasurementOperator<T> + ?Sized,
    S: DenoiserSelector<T> + ?Sized,
{
    op.check_signal(&state.x)?;
    op.check_measurement(y)?;
    let t = state.iter;
    let m = op.m();
    let b = match variant {
        Variant::Damp if t > 0 => onsager(&state.z, state.div, m),
        _ => op.zero_measurement(),
    };
    let z = y.sub(&op.apply(&state.x)?)?.add(&b)?;
    finite(t, "residual", z.is_finite())?;
    let sigma_hat = variant.sigma_scale() * (z.norm_sq() / m as f64).sqrt();
    let r = state.x.add(&op.apply_adjoint(&z)?)?;
    finite(t, "denoiser input", r.is_finite())?;
    let denoiser = selector.select(sigma_hat, t)?;
    let x = denoiser.denoise(&r, T::of(sigma_hat))?;
    finite(t, "denoiser output", x.is_finite())?;
    let div = match variant {
        Variant::Damp => {
            mc_divergence_with(denoiser, &r, &x, T::of(sigma_hat), step.probe_seed ^ t as u64, step.probe)
                .map_err(|e| match e {
                    Error::Numeric { what, .. } => Error::Numeric { iter: t, what },
                    e => e,
                })?
                .value
        }
        Variant::Dit => 0.0,
    };
    Ok(RecoveryState { x, z, b, sigma_hat, iter: t + 1, div, pseudo_data: r })
}

/// One D-AMP step: Onsager-corrected residual, `sigma = ||z||/sqrt(m)`.
pub fn damp_iterate<T: Scalar, O, S>(
    state: &RecoveryState<T>,
    op: &O,
    y: &MeasurementVector<T>,
    selector: &S,
    step: StepConfig,
) -> Result<RecoveryState<T>>
where
    O: MeasurementOperator<T> + ?Sized,
    S: DenoiserSelector<T> + ?Sized,
{
    iterate(Variant::Damp, state, op, y, selector, step)
}

/// One D-IT step: plain residual, `sigma = 2 ||z||/sqrt(m)`.
pub fn dit_iterate<T: Scalar, O, S>(
    state: &RecoveryState<T>,
    op: &O,
    y: &MeasurementVector<T>,
    selector: &S,
    step: StepConfig,
) -> Result<RecoveryState<T>>
where
    O: MeasurementOperator<T> + ?Sized,
    S: DenoiserSelector<T> + ?Sized,
{
    iterate(Variant::Dit, state, op, y, selector, step)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub iters: usize,
    pub variant: Variant,
    pub probe: ProbeConfig,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { iters: 10, variant: Variant::Damp, probe: ProbeConfig::default(), seed: 0, record_trace: true }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iteration count must be at least 1".into()));
        }
        if self.probe.probes == 0 {
            return Err(Error::Config("at least one divergence probe is required".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> StepConfig {
        StepConfig { probe: self.probe, probe_seed: self.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Zero-based index of the step.
    pub iter: usize,
    pub sigma_hat: f64,
    /// `(1/n) ||x^{t+1} - x_o||^2`.
    pub mse: Option<f64>,
    /// Standard deviation of the effective noise `x^t + Re(A^H z^t) - x_o`.
    pub effective_noise_std: Option<f64>,
    pub time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTrace {
    pub records: Vec<TraceRecord>,
}

impl RecoveryTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_mse(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.mse)
    }

    /// `iter,sigma_hat,mse,time_s`; `mse` is empty without ground truth and
    /// times are written as 0 when `timing` is off.
    pub fn write_csv<W: Write>(&self, mut w: W, timing: bool) -> std::io::Result<()> {
        writeln!(w, "iter,sigma_hat,mse,time_s")?;
        for r in &self.records {
            let mse = r.mse.map(|v| format!("{v:e}")).unwrap_or_default();
            let time = if timing { r.time_s } else { 0.0 };
            writeln!(w, "{},{:e},{},{:.6}", r.iter, r.sigma_hat, mse, time)?;
        }
        Ok(())
    }
}

pub(crate) fn std_dev<T: Scalar>(a: &SignalVector<T>, b: &SignalVector<T>) -> f64 {
    let n = a.len() as f64;
    let d: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x.f64() - y.f64()).collect();
    let mean = d.iter().sum::<f64>() / n;
    (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Runs exactly `config.iters` steps from `x^0 = 0`.
pub fn recover<T: Scalar, O, S>(
    y: &MeasurementVector<T>,
    op: &O,
    selector: &S,
    config: &SolverConfig,
    truth: Option<&SignalVector<T>>,
) -> Result<(SignalVector<T>, RecoveryTrace)>
where
    O: MeasurementOperator<T> + ?Sized,
    S: DenoiserSelector<T> + ?Sized,
{
    config.validate()?;
    if let Some(t) = truth {
        op.check_signal(t)?;
    }
    let step = config.step();
    let mut state = RecoveryState::initial(op);
    let mut trace = RecoveryTrace::default();
    for _ in 0..config.iters {
        let start = Instant::now();
        let next = iterate(config.variant, &state, op, y, selector, step)?;
        let time_s = start.elapsed().as_secs_f64();
        if config.record_trace {
            trace.records.push(TraceRecord {
                iter: state.iter,
                sigma_hat: next.sigma_hat,
                mse: truth.map(|t| next.x.mse(t)).transpose()?,
                effective_noise_std: truth.map(|t| std_dev(&next.pseudo_data, t)),
                time_s,
            });
        }
        state = next;
    }
    Ok((state.x, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{DenoiserModel, DenoiserSpec};
    use crate::measure::{CodedDiffractionOperator, GaussianOperator};
    use crate::rng;

    /// Always returns `k * x`, regardless of sigma.
    struct Scale(f64);
    impl Denoiser<f64> for Scale {
        fn denoise(&self, x: &SignalVector<f64>, _s: f64) -> Result<SignalVector<f64>> {
            Ok(x.scale(self.0))
        }
    }

    struct Nan;
    impl Denoiser<f64> for Nan {
        fn denoise(&self, x: &SignalVector<f64>, _s: f64) -> Result<SignalVector<f64>> {
            Ok(x.with_values(vec![f64::NAN; x.len()]))
        }
    }

    fn image(h: usize, w: usize, seed: u64) -> SignalVector<f64> {
        let mut r = rng::from_seed(seed);
        SignalVector::new(h, w, (0..h * w).map(|_| rand::Rng::random::<f64>(&mut r)).collect()).unwrap()
    }

    #[test]
    fn onsager_examples() {
        let z = MeasurementVector::Real(vec![2.0f64, -4.0]);
        assert_eq!(onsager(&z, 3.0, 2), MeasurementVector::Real(vec![3.0, -6.0]));
        assert_eq!(onsager(&z, 0.0, 2), MeasurementVector::Real(vec![0.0, 0.0]));
        assert_eq!(onsager(&z, 2.0, 2), z);
    }

    #[test]
    fn unitary_cdp_identity_inverts_in_one_step() {
        let x = image(8, 8, 1);
        let op = CodedDiffractionOperator::<f64>::new((8, 8), 64, 3).unwrap();
        let y = op.apply(&x).unwrap();
        let cfg = SolverConfig { iters: 1, ..Default::default() };
        let (est, _) = recover(&y, &op, &Fixed(DenoiserModel::identity()), &cfg, None).unwrap();
        let rel = (est.sub(&x).unwrap().norm_sq() / x.norm_sq()).sqrt();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn zero_measurements_stay_at_zero() {
        let op = GaussianOperator::<f64>::new(20, 40, 2).unwrap();
        let y = op.zero_measurement();
        let dct = DenoiserModel::analytic(DenoiserSpec::SoftThresholdDct { multiplier: 1.0 }).unwrap();
        for variant in [Variant::Dit, Variant::Damp] {
            let cfg = SolverConfig { iters: 5, variant, ..Default::default() };
            let (est, trace) = recover(&y, &op, &Fixed(&dct), &cfg, None).unwrap();
            assert!(est.values().iter().all(|v| *v == 0.0));
            assert!(trace.records.iter().all(|r| r.sigma_hat == 0.0));
        }
    }

    #[test]
    fn first_step_agrees_between_variants() {
        let x = image(6, 6, 4);
        let op = GaussianOperator::<f64>::new(18, 36, 5).unwrap().with_shape(6, 6).unwrap();
        let y = op.apply(&x).unwrap();
        let s0 = RecoveryState::initial(&op);
        let sel = Fixed(Scale(0.7));
        let a = damp_iterate(&s0, &op, &y, &sel, StepConfig::default()).unwrap();
        let b = dit_iterate(&s0, &op, &y, &sel, StepConfig::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(b.sigma_hat, 2.0 * a.sigma_hat);
        assert_eq!(a.b.norm_sq(), 0.0);
    }

    #[test]
    fn onsager_uses_previous_divergence() {
        let x = image(4, 4, 6);
        let op = GaussianOperator::<f64>::new(8, 16, 7).unwrap().with_shape(4, 4).unwrap();
        let y = op.apply(&x).unwrap();
        let sel = Fixed(Scale(0.5));
        let s1 = damp_iterate(&RecoveryState::initial(&op), &op, &y, &sel, StepConfig::default()).unwrap();
        // For D(x) = k x the probe estimate is k ||eta||^2 with the iteration-0 probe.
        let eta: Vec<f64> = rng::normal_vec(&mut rng::stream(0, "divergence-probe"), 16);
        let expect_div = 0.5 * eta.iter().map(|e| e * e).sum::<f64>();
        assert!((s1.div - expect_div).abs() < 1e-9 * expect_div, "div {} vs {expect_div}", s1.div);
        let s2 = damp_iterate(&s1, &op, &y, &sel, StepConfig::default()).unwrap();
        let expect = s1.z.scale(expect_div / 8.0);
        assert!(s2.b.sub(&expect).unwrap().norm_sq() < 1e-20);
        let ax = op.apply(&s1.x).unwrap();
        assert!(s2.z.sub(&y.sub(&ax).unwrap().add(&expect).unwrap()).unwrap().norm_sq() < 1e-20);
        assert!((s2.sigma_hat - (s2.z.norm_sq() / 8.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn trace_and_config() {
        let x = image(4, 4, 8);
        let op = GaussianOperator::<f64>::new(8, 16, 9).unwrap().with_shape(4, 4).unwrap();
        let y = op.apply(&x).unwrap();
        let sel = Fixed(Scale(0.9));
        let bad = SolverConfig { iters: 0, ..Default::default() };
        assert!(matches!(recover(&y, &op, &sel, &bad, None), Err(Error::Config(_))));
        let cfg = SolverConfig { iters: 4, ..Default::default() };
        let (est, trace) = recover(&y, &op, &sel, &cfg, Some(&x)).unwrap();
        assert_eq!(trace.len(), 4);
        assert_eq!(trace.final_mse().unwrap(), est.mse(&x).unwrap());
        let (_, blind) = recover(&y, &op, &sel, &cfg, None).unwrap();
        assert!(blind.records.iter().all(|r| r.mse.is_none() && r.effective_noise_std.is_none()));
        let mut csv = Vec::new();
        blind.write_csv(&mut csv, false).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iter,sigma_hat,mse,time_s");
        assert_eq!(text.lines().count(), 5);
        assert!(text.lines().nth(1).unwrap().ends_with(",,0.000000"));
    }

    #[test]
    fn non_finite_output_reports_iteration() {
        let x = image(4, 4, 10);
        let op = GaussianOperator::<f64>::new(8, 16, 11).unwrap().with_shape(4, 4).unwrap();
        let y = op.apply(&x).unwrap();
        let cfg = SolverConfig { iters: 3, ..Default::default() };
        match recover(&y, &op, &Fixed(Nan), &cfg, None) {
            Err(Error::Numeric { iter, .. }) => assert_eq!(iter, 0),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn recovery_is_deterministic() {
        let x = image(8, 8, 12);
        let op = GaussianOperator::<f64>::new(32, 64, 13).unwrap().with_shape(8, 8).unwrap();
        let y = op.apply(&x).unwrap();
        let dct = Fixed(DenoiserModel::analytic(DenoiserSpec::SoftThresholdDct { multiplier: 1.0 }).unwrap());
        let cfg = SolverConfig { iters: 6, seed: 5, ..Default::default() };
        let a = recover(&y, &op, &dct, &cfg, Some(&x)).unwrap();
        let b = recover(&y, &op, &dct, &cfg, Some(&x)).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(
            a.1.records.iter().map(|r| r.mse).collect::<Vec<_>>(),
            b.1.records.iter().map(|r| r.mse).collect::<Vec<_>>()
        );
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("DAMP".parse::<Variant>().unwrap(), Variant::Damp);
        assert_eq!("dit".parse::<Variant>().unwrap(), Variant::Dit);
        assert!("vamp".parse::<Variant>().is_err());
    }
}
