use super::{BatchNorm, RunningStats, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the stored running statistics.
    #[default]
    Infer,
}

/// What the reverse pass needs from a batch-norm forward.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub mode: BnMode,
    /// Normalized input before scale and shift.
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<f64>,
}

/// Per-channel normalization over (batch, height, width).
///
/// Reductions are accumulated in `f64`. In train mode the running
/// statistics are blended with the batch statistics (unbiased variance).
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor4<T>,
    bn: &mut BatchNorm<T>,
    mode: BnMode,
) -> Result<(Tensor4<T>, BnSaved<T>)> {
    let c = input.channels();
    if bn.channels() != c || bn.beta.len() != c {
        return Err(Error::dim(format!("batch norm has {} channels, input {}", bn.channels(), c)));
    }
    let count = input.len() / c.max(1);
    let (mean, inv_std) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0f64; c];
            for px in input.data().chunks_exact(c) {
                mean.iter_mut().zip(px).for_each(|(m, v)| *m += v.f64());
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            let mut var = vec![0.0f64; c];
            for px in input.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
                    let d = v.f64() - m;
                    *s += d * d;
                }
            }
            let biased: Vec<f64> = var.iter().map(|s| s / count as f64).collect();
            if let Some(run) = &mut bn.running {
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    run.mean[ch] =
                        T::of(bn.momentum * run.mean[ch].f64() + (1.0 - bn.momentum) * mean[ch]);
                    run.var[ch] = T::of(
                        bn.momentum * run.var[ch].f64() + (1.0 - bn.momentum) * biased[ch] * unbias,
                    );
                }
            }
            let inv: Vec<f64> = biased.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
            (mean, inv)
        }
        BnMode::Infer => {
            let RunningStats { mean, var } = bn.running.as_ref().ok_or_else(|| {
                Error::Config("batch norm in inference mode needs running statistics".into())
            })?;
            (
                mean.iter().map(|m| m.f64()).collect(),
                var.iter().map(|v| 1.0 / (v.f64() + bn.eps).sqrt()).collect(),
            )
        }
    };
    let mut xhat = Tensor4::zeros(input.shape());
    let mut out = Tensor4::zeros(input.shape());
    for ((src, xh), dst) in input
        .data()
        .chunks_exact(c)
        .zip(xhat.data_mut().chunks_exact_mut(c))
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let n = (src[ch].f64() - mean[ch]) * inv_std[ch];
            xh[ch] = T::of(n);
            dst[ch] = T::of(bn.gamma[ch].f64() * n + bn.beta[ch].f64());
        }
    }
    Ok((out, BnSaved { mode, xhat, inv_std }))
}

/// Input gradient plus (gamma, beta) gradients.
pub fn batchnorm_backward<T: Scalar>(
    gamma: &[T],
    saved: &BnSaved<T>,
    grad_out: &Tensor4<T>,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    saved.xhat.check_same(grad_out)?;
    let c = grad_out.channels();
    let count = (grad_out.len() / c.max(1)) as f64;
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for (g, xh) in grad_out.data().chunks_exact(c).zip(saved.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            dgamma[ch] += g[ch].f64() * xh[ch].f64();
            dbeta[ch] += g[ch].f64();
        }
    }
    let mut grad_in = Tensor4::zeros(grad_out.shape());
    for ((g, xh), dst) in grad_out
        .data()
        .chunks_exact(c)
        .zip(saved.xhat.data().chunks_exact(c))
        .zip(grad_in.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let scale = gamma[ch].f64() * saved.inv_std[ch];
            dst[ch] = T::of(match saved.mode {
                BnMode::Infer => scale * g[ch].f64(),
                BnMode::Train => {
                    scale * (g[ch].f64() - dbeta[ch] / count - xh[ch].f64() * dgamma[ch] / count)
                }
            });
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(T::of).collect();
    Ok((grad_in, cast(dgamma), cast(dbeta)))
}
