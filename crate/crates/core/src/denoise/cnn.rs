//! Residual CNN denoiser in the DnCNN layout:
//! conv+ReLU, then `depth - 2` blocks of conv+BN+ReLU, then a final conv
//! back to the image channels. The network predicts the noise, and the
//! denoised image is `input - prediction`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{batchnorm_forward, conv2d_forward, relu_forward, BnMode, LayerParams, Tape, Tensor4, Var};

pub const MIN_DEPTH: usize = 4;
pub const MAX_DEPTH: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub depth: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub batch_norm: bool,
}

fn one() -> usize {
    1
}

impl Default for CnnArch {
    fn default() -> Self {
        Self { depth: 6, width: 16, channels: 1, batch_norm: true }
    }
}

impl CnnArch {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_DEPTH..=MAX_DEPTH).contains(&self.depth) {
            return Err(Error::Config(format!(
                "cnn depth {} outside [{MIN_DEPTH}, {MAX_DEPTH}]",
                self.depth
            )));
        }
        if self.width == 0 || self.channels == 0 {
            return Err(Error::Config("cnn width and channels must be positive".into()));
        }
        Ok(())
    }

    /// `(c_in, c_out, batch_norm)` of each convolution.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, bool)> {
        (0..self.depth)
            .map(|i| {
                let c_in = if i == 0 { self.channels } else { self.width };
                let c_out = if i + 1 == self.depth { self.channels } else { self.width };
                let bn = self.batch_norm && i > 0 && i + 1 < self.depth;
                (c_in, c_out, bn)
            })
            .collect()
    }

    pub fn init<T: Scalar>(&self, rng: &mut Rng) -> Vec<LayerParams<T>> {
        self.layer_shapes()
            .into_iter()
            .map(|(ci, co, bn)| LayerParams::he_init(ci, co, bn, rng))
            .collect()
    }

    pub fn check_layers<T: Scalar>(&self, layers: &[LayerParams<T>]) -> Result<()> {
        let shapes = self.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::dim(format!("architecture has {} layers, got {}", shapes.len(), layers.len())));
        }
        for (i, ((ci, co, bn), l)) in shapes.iter().zip(layers).enumerate() {
            l.validate()?;
            if l.c_in != *ci || l.c_out != *co || l.bn.is_some() != *bn {
                return Err(Error::dim(format!("layer {i} does not match the architecture")));
            }
        }
        Ok(())
    }
}

/// Noise prediction without recording. In `Train` mode batch statistics
/// are used but the running averages are left untouched.
pub fn residual_forward<T: Scalar>(
    layers: &[LayerParams<T>],
    input: &Tensor4<T>,
    mode: BnMode,
) -> Result<Tensor4<T>> {
    let last = layers.len().saturating_sub(1);
    let mut h = input.clone();
    for (i, l) in layers.iter().enumerate() {
        h = conv2d_forward(&h, l)?;
        if let Some(bn) = &l.bn {
            let mut bn = bn.clone();
            h = batchnorm_forward(&h, &mut bn, mode)?.0;
        }
        if i < last {
            h = relu_forward(&h);
        }
    }
    Ok(h)
}

/// `input - residual_forward(input)`.
pub fn denoise_tensor<T: Scalar>(
    layers: &[LayerParams<T>],
    input: &Tensor4<T>,
    mode: BnMode,
) -> Result<Tensor4<T>> {
    let r = residual_forward(layers, input, mode)?;
    input.sub(&r)
}

/// Records the denoiser on `tape` starting from `x`; returns the denoised
/// output. Layer `i` uses parameter slot `slot_base + i`. Train-mode batch
/// norm updates the running statistics in `layers`.
pub fn record<T: Scalar>(
    tape: &mut Tape<T>,
    layers: &mut [LayerParams<T>],
    x: Var,
    mode: BnMode,
    slot_base: usize,
) -> Result<Var> {
    let last = layers.len().saturating_sub(1);
    let mut h = x;
    for (i, l) in layers.iter_mut().enumerate() {
        h = tape.conv2d(h, l, slot_base + i)?;
        if l.bn.is_some() {
            h = tape.batchnorm(h, l, slot_base + i, mode)?;
        }
        if i < last {
            h = tape.relu(h)?;
        }
    }
    tape.sub(x, h)
}
