use std::collections::BTreeMap;

use super::batchnorm::{batchnorm_backward, batchnorm_forward, BnMode, BnSaved};
use super::conv::{conv2d_backward, conv2d_forward};
use super::{relu_backward, relu_forward, LayerGrads, LayerParams, Tensor4};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Node<T> {
    Leaf,
    Conv { input: usize, slot: usize, params: LayerParams<T> },
    Norm { input: usize, slot: usize, gamma: Vec<T>, saved: BnSaved<T> },
    Relu { input: usize },
    Add(usize, usize),
    Sub(usize, usize),
}

/// Linear record of forward ops.
///
/// Ops are appended in execution order, which is already a topological
/// order, so the reverse pass is a single backwards sweep. Parameters are
/// identified by a caller-chosen slot; uses of the same slot accumulate.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Tensor4<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    layers: BTreeMap<usize, LayerGrads<T>>,
    leaves: BTreeMap<usize, Tensor4<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for parameter slot `slot`, if any recorded op used it.
    pub fn layer(&self, slot: usize) -> Option<&LayerGrads<T>> {
        self.layers.get(&slot)
    }

    pub fn layers(&self) -> impl Iterator<Item = (usize, &LayerGrads<T>)> {
        self.layers.iter().map(|(k, v)| (*k, v))
    }

    /// Gradient with respect to a leaf. Leaves the output does not depend on
    /// get `None`.
    pub fn input(&self, v: Var) -> Option<&Tensor4<T>> {
        self.leaves.get(&v.0)
    }

    pub fn take_input(&mut self, v: Var) -> Option<Tensor4<T>> {
        self.leaves.remove(&v.0)
    }

    pub fn into_layers(self) -> BTreeMap<usize, LayerGrads<T>> {
        self.layers
    }
}

fn add_into<T: Scalar>(dst: &mut Vec<T>, src: Vec<T>) {
    if dst.is_empty() {
        *dst = src;
    } else {
        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
    }
}

fn add_opt<T: Scalar>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => add_into(d, src),
        None => *dst = Some(src),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), values: Vec::new(), consumed: false }
    }

    fn push(&mut self, node: Node<T>, value: Tensor4<T>) -> Var {
        self.nodes.push(node);
        self.values.push(value);
        Var(self.values.len() - 1)
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::Usage("tape already consumed by a backward pass".into()))
        } else {
            Ok(())
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor4<T>) -> Var {
        self.push(Node::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.values[v.0]
    }

    pub fn conv2d(&mut self, x: Var, params: &LayerParams<T>, slot: usize) -> Result<Var> {
        self.live()?;
        let out = conv2d_forward(&self.values[x.0], params)?;
        let kept = LayerParams {
            c_in: params.c_in,
            c_out: params.c_out,
            kernels: params.kernels.clone(),
            bias: params.bias.clone(),
            bn: None,
        };
        Ok(self.push(Node::Conv { input: x.0, slot, params: kept }, out))
    }

    /// Batch norm of `params.bn`; train mode updates its running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        params: &mut LayerParams<T>,
        slot: usize,
        mode: BnMode,
    ) -> Result<Var> {
        self.live()?;
        let bn = params
            .bn
            .as_mut()
            .ok_or_else(|| Error::Config("layer has no batch-norm parameters".into()))?;
        let (out, saved) = batchnorm_forward(&self.values[x.0], bn, mode)?;
        let gamma = bn.gamma.clone();
        Ok(self.push(Node::Norm { input: x.0, slot, gamma, saved }, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = relu_forward(&self.values[x.0]);
        Ok(self.push(Node::Relu { input: x.0 }, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let out = self.values[a.0].add(&self.values[b.0])?;
        Ok(self.push(Node::Add(a.0, b.0), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let out = self.values[a.0].sub(&self.values[b.0])?;
        Ok(self.push(Node::Sub(a.0, b.0), out))
    }

    /// Reverse pass from `output` seeded with `output_grad`. Consumes the
    /// recorded activations; a second call is a usage error.
    pub fn backward(&mut self, output: Var, output_grad: Tensor4<T>) -> Result<Gradients<T>> {
        self.live()?;
        self.values[output.0].check_same(&output_grad)?;
        self.consumed = true;
        let values = std::mem::take(&mut self.values);
        let nodes = std::mem::take(&mut self.nodes);

        let mut grads: Vec<Option<Tensor4<T>>> = (0..values.len()).map(|_| None).collect();
        grads[output.0] = Some(output_grad);
        let mut out = Gradients { layers: BTreeMap::new(), leaves: BTreeMap::new() };

        fn acc<T: Scalar>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) {
            match slot {
                Some(s) => s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                None => *slot = Some(g),
            }
        }

        for (i, node) in nodes.iter().enumerate().take(output.0 + 1).rev() {
            let Some(g) = grads[i].take() else { continue };
            match node {
                Node::Leaf => {
                    out.leaves.insert(i, g);
                }
                Node::Conv { input, slot, params } => {
                    let (gi, lg) = conv2d_backward(&values[*input], params, &g)?;
                    let e = out.layers.entry(*slot).or_insert_with(|| LayerGrads {
                        kernels: Vec::new(),
                        bias: Vec::new(),
                        gamma: None,
                        beta: None,
                    });
                    add_into(&mut e.kernels, lg.kernels);
                    add_into(&mut e.bias, lg.bias);
                    acc(&mut grads[*input], gi);
                }
                Node::Norm { input, slot, gamma, saved } => {
                    let (gi, dg, db) = batchnorm_backward(gamma, saved, &g)?;
                    let e = out.layers.entry(*slot).or_insert_with(|| LayerGrads {
                        kernels: Vec::new(),
                        bias: Vec::new(),
                        gamma: None,
                        beta: None,
                    });
                    add_opt(&mut e.gamma, dg);
                    add_opt(&mut e.beta, db);
                    acc(&mut grads[*input], gi);
                }
                Node::Relu { input } => {
                    let gi = relu_backward(&values[*input], &g)?;
                    acc(&mut grads[*input], gi);
                }
                Node::Add(a, b) => {
                    acc(&mut grads[*b], g.clone());
                    acc(&mut grads[*a], g);
                }
                Node::Sub(a, b) => {
                    acc(&mut grads[*b], g.map(|v| -v));
                    acc(&mut grads[*a], g);
                }
            }
        }
        Ok(out)
    }
}
