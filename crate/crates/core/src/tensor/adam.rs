//! Adam with bias correction, over a list of [`LayerParams`].

use super::{LayerGrads, LayerParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[LayerParams<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.num_trainable()]).collect();
        Self { config, step_count: 0, first: zeros(), second: zeros() }
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// One update of every layer. Nothing is modified if any gradient is
    /// non-finite; the error names the first offending layer.
    pub fn step(&mut self, params: &mut [LayerParams<T>], grads: &[LayerGrads<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(Error::dim(format!(
                "adam: {} parameter layers, {} gradient layers, state for {}",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let plen: Vec<usize> = p.trainable().iter().map(|s| s.len()).collect();
            let glen: Vec<usize> = g.slices().iter().map(|s| s.len()).collect();
            if plen != glen {
                return Err(Error::dim(format!("adam: gradient layout of layer {i} differs")));
            }
            if !g.is_finite() {
                return Err(Error::Training { layer: i, what: "non-finite gradient".into() });
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (layer, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[layer];
            let v = &mut self.second[layer];
            let mut k = 0;
            for (ps, gs) in p.trainable_mut().into_iter().zip(g.slices()) {
                for (w, gv) in ps.iter_mut().zip(gs) {
                    let gv = gv.f64();
                    let mk = beta1 * m[k].f64() + (1.0 - beta1) * gv;
                    let vk = beta2 * v[k].f64() + (1.0 - beta2) * gv * gv;
                    m[k] = T::of(mk);
                    v[k] = T::of(vk);
                    let update = lr * (mk / c1) / ((vk / c2).sqrt() + eps);
                    *w = T::of(w.f64() - update);
                    k += 1;
                }
            }
        }
        Ok(())
    }
}

/// Learning-rate ladder that steps down when validation loss stops
/// improving for `patience` consecutive evaluations.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PlateauSchedule {
    pub rates: Vec<f64>,
    pub patience: usize,
    #[serde(skip)]
    stage: usize,
    #[serde(skip)]
    best: Option<f64>,
    #[serde(skip)]
    stale: usize,
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        Self::new(vec![1e-3, 1e-4, 1e-5], 2)
    }
}

impl PlateauSchedule {
    pub fn new(rates: Vec<f64>, patience: usize) -> Self {
        assert!(!rates.is_empty(), "learning-rate ladder must not be empty");
        Self { rates, patience, stage: 0, best: None, stale: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.rates[self.stage]
    }

    /// Feeds one validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(b) if val_loss >= b => {
                self.stale += 1;
                if self.stale >= self.patience && self.stage + 1 < self.rates.len() {
                    self.stage += 1;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.stale = 0;
            }
        }
        self.lr()
    }
}
