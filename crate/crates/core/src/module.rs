//! Parameter ownership shared by layers, the trainer and gradient checks.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::BatchStats;
use crate::repgraph::AttentionWeights;
use crate::tensor::{Scalar, Tensor4};

/// Something that owns trainable tensors.
///
/// `params` and `params_mut` must list tensors in the same order; layers bind
/// graph leaves in that order and read them back through [`ParamCursor`].
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<&Tensor4<T>>;

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Registers every parameter as a graph leaf.
    fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.params()
            .into_iter()
            .map(|p| g.leaf(p.clone()))
            .collect()
    }

    /// Overwrites parameters from `values` (same order and shapes).
    fn load_params(&mut self, values: &[Tensor4<T>]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                values.len()
            )));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::dim("load_params", slot.shape(), v.shape()));
            }
            **slot = v.clone();
        }
        Ok(())
    }
}

/// Hands out bound parameter vars in declaration order.
#[derive(Debug)]
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    at: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        ParamCursor { vars, at: 0 }
    }

    pub fn next_var(&mut self) -> Result<Var> {
        let v = self
            .vars
            .get(self.at)
            .copied()
            .ok_or_else(|| Error::contract("ran out of bound parameters"))?;
        self.at += 1;
        Ok(v)
    }

    pub fn finish(self) -> Result<()> {
        if self.at != self.vars.len() {
            return Err(Error::contract(format!(
                "{} bound parameters left unused",
                self.vars.len() - self.at
            )));
        }
        Ok(())
    }
}

/// Whether batch norm uses batch statistics (`Train`) or running ones (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn training(self) -> bool {
        self == Mode::Train
    }
}

/// Result of running a layer on a graph.
#[derive(Debug, Clone)]
pub struct LayerOutput<T> {
    pub out: Var,
    /// Sparse attention rows, when the layer has them.
    pub attention: Option<AttentionWeights<T>>,
    /// Regressed offsets, when the layer samples.
    pub offsets: Option<Var>,
    /// Batch statistics of every batch norm in declaration order (train mode
    /// only); pass them to [`Layer::update_running_stats`].
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<T> LayerOutput<T> {
    pub fn plain(out: Var) -> Self {
        LayerOutput {
            out,
            attention: None,
            offsets: None,
            bn_stats: Vec::new(),
        }
    }
}

/// A block mapping `(n, c, h, w)` features to the same shape.
pub trait Layer<T: Scalar>: Module<T> {
    fn channels(&self) -> usize;

    /// Runs the block on `g` using `params` (as returned by [`Module::bind`]).
    fn forward_with(
        &self,
        g: &mut Graph<T>,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<LayerOutput<T>>;

    /// Folds batch statistics from a training-mode forward into the running
    /// averages.
    fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()>;

    /// Inference in eval mode without recording gradients.
    fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = Graph::no_grad();
        let params = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward_with(&mut g, xv, &params, Mode::Eval)?;
        Ok(g.value(out.out).clone())
    }
}

/// Applies `stats` to `bns` pairwise, checking the counts agree.
pub(crate) fn apply_bn_stats<T: Scalar>(
    bns: Vec<&mut crate::ops::BatchNormParams<T>>,
    stats: &[BatchStats<T>],
) -> Result<()> {
    if bns.len() != stats.len() {
        return Err(Error::contract(format!(
            "expected {} batch statistics, got {}",
            bns.len(),
            stats.len()
        )));
    }
    for (bn, st) in bns.into_iter().zip(stats) {
        if st.mean.len() != bn.channels() {
            return Err(Error::dim(
                "update_running_stats",
                st.mean.len(),
                bn.channels(),
            ));
        }
        bn.update_running(st);
    }
    Ok(())
}
