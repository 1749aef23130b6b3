use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

/// Variance floor added inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running: Option<RunningStats<T>>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running: Some(RunningStats {
                mean: vec![T::zero(); channels],
                var: vec![T::one(); channels],
            }),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// One 3x3 convolution with bias and optional batch normalization.
///
/// Kernels are stored as `[ky][kx][c_in][c_out]`, i.e. a `(9 * c_in) x c_out`
/// row-major matrix, which is what the im2col product consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub c_in: usize,
    pub c_out: usize,
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
    pub bn: Option<BatchNorm<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(c_in: usize, c_out: usize, batch_norm: bool) -> Self {
        Self {
            c_in,
            c_out,
            kernels: vec![T::zero(); 9 * c_in * c_out],
            bias: vec![T::zero(); c_out],
            bn: batch_norm.then(|| BatchNorm::new(c_out)),
        }
    }

    /// He-style initialization: kernels ~ N(0, 2 / (9 c_in)).
    pub fn he_init(c_in: usize, c_out: usize, batch_norm: bool, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(c_in, c_out, batch_norm);
        let std = (2.0 / (9.0 * c_in as f64)).sqrt();
        for k in &mut p.kernels {
            *k = T::of(std * rng::normal::<f64>(rng));
        }
        p
    }

    #[inline]
    pub fn kernel_index(&self, ky: usize, kx: usize, ci: usize, co: usize) -> usize {
        ((ky * 3 + kx) * self.c_in + ci) * self.c_out + co
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.len() != 9 * self.c_in * self.c_out || self.bias.len() != self.c_out {
            return Err(Error::dim(format!(
                "layer {}->{} has {} kernel and {} bias entries",
                self.c_in,
                self.c_out,
                self.kernels.len(),
                self.bias.len()
            )));
        }
        if let Some(bn) = &self.bn {
            let c = self.c_out;
            let ok = bn.gamma.len() == c
                && bn.beta.len() == c
                && bn.running.as_ref().is_none_or(|r| r.mean.len() == c && r.var.len() == c);
            if !ok {
                return Err(Error::dim("batch-norm vectors do not match c_out"));
            }
            if bn.running.as_ref().is_some_and(|r| r.var.iter().any(|v| *v < T::zero())) {
                return Err(Error::Argument("negative running variance".into()));
            }
        }
        Ok(())
    }

    /// Trainable vectors in a fixed order: kernels, bias, gamma, beta.
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.kernels, &self.bias];
        if let Some(bn) = &self.bn {
            v.push(&bn.gamma);
            v.push(&bn.beta);
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = vec![&mut self.kernels, &mut self.bias];
        if let Some(bn) = &mut self.bn {
            v.push(&mut bn.gamma);
            v.push(&mut bn.beta);
        }
        v
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|s| s.len()).sum()
    }
}

/// Gradients for one [`LayerParams`], same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub kernels: Vec<T>,
    pub bias: Vec<T>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

impl<T: Scalar> LayerGrads<T> {
    pub fn zeros_like(p: &LayerParams<T>) -> Self {
        Self {
            kernels: vec![T::zero(); p.kernels.len()],
            bias: vec![T::zero(); p.bias.len()],
            gamma: p.bn.as_ref().map(|b| vec![T::zero(); b.gamma.len()]),
            beta: p.bn.as_ref().map(|b| vec![T::zero(); b.beta.len()]),
        }
    }

    pub fn slices(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = vec![&self.kernels, &self.bias];
        if let Some(g) = &self.gamma {
            v.push(g);
        }
        if let Some(b) = &self.beta {
            v.push(b);
        }
        v
    }

    pub fn accumulate(&mut self, other: &Self) {
        fn add<T: Scalar>(a: &mut [T], b: &[T]) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
        add(&mut self.kernels, &other.kernels);
        add(&mut self.bias, &other.bias);
        if let (Some(a), Some(b)) = (&mut self.gamma, &other.gamma) {
            add(a, b);
        }
        if let (Some(a), Some(b)) = (&mut self.beta, &other.beta) {
            add(a, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
