//! The aggregation step that merges an attention output with the block input.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::module::{Module, ParamCursor};
use crate::ops::{BatchNormParams, BatchStats, BoundBatchNorm, BoundProjection, Projection1x1};
use crate::tensor::{Rng, Scalar, Tensor4};

/// How `x̃` (width `C'`) is combined with the input `x` (width `C`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionMode {
    /// `W_y x̃ + x`.
    #[default]
    Sum,
    /// `W [x̃ ; x]` with `W: C + C' → C`, no residual add.
    Concat,
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionMode::Sum),
            "concat" => Ok(FusionMode::Concat),
            other => Err(Error::Validation(format!(
                "unknown fusion `{other}` (expected sum or concat)"
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Sum => "sum",
            FusionMode::Concat => "concat",
        })
    }
}

/// Output head: a 1×1 projection back to `C` channels, an optional batch
/// norm, and the residual add in sum mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Fusion<T> {
    pub mode: FusionMode,
    pub proj: Projection1x1<T>,
    pub bn: Option<BatchNormParams<T>>,
}

impl<T: Scalar> Fusion<T> {
    /// `zero` makes the head output exactly zero (sum mode then returns `x`).
    /// The projection has a bias only when no batch norm follows it.
    pub fn init(
        rng: &mut Rng,
        mode: FusionMode,
        c: usize,
        cp: usize,
        with_bn: bool,
        zero: bool,
    ) -> Self {
        let c_in = match mode {
            FusionMode::Sum => cp,
            FusionMode::Concat => c + cp,
        };
        let proj = if zero {
            Projection1x1::zeros(c_in, c, !with_bn)
        } else {
            Projection1x1::init(rng, c_in, c, !with_bn)
        };
        let bn = with_bn.then(|| {
            if zero {
                BatchNormParams::zeroed(c)
            } else {
                BatchNormParams::new(c)
            }
        });
        Fusion { mode, proj, bn }
    }

    pub fn bind_from(&self, cur: &mut ParamCursor<'_>) -> Result<BoundFusion<T>> {
        Ok(BoundFusion {
            mode: self.mode,
            proj: self.proj.bind_from(cur)?,
            bn: self.bn.as_ref().map(|bn| bn.bind_from(cur)).transpose()?,
        })
    }

    pub fn macs(&self, nodes: u64) -> u64 {
        nodes * (self.proj.c_in() * self.proj.c_out()) as u64
    }
}

impl<T: Scalar> Module<T> for Fusion<T> {
    fn params(&self) -> Vec<&Tensor4<T>> {
        let mut v = self.proj.params();
        if let Some(bn) = &self.bn {
            v.extend(bn.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut v = self.proj.params_mut();
        if let Some(bn) = &mut self.bn {
            v.extend(bn.params_mut());
        }
        v
    }
}

/// Graph handles for a [`Fusion`].
#[derive(Debug, Clone)]
pub struct BoundFusion<T> {
    pub mode: FusionMode,
    pub proj: BoundProjection,
    pub bn: Option<BoundBatchNorm<T>>,
}

impl<T: Scalar> BoundFusion<T> {
    pub fn apply(
        &self,
        g: &mut Graph<T>,
        x_tilde: Var,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let head_in = match self.mode {
            FusionMode::Sum => x_tilde,
            FusionMode::Concat => g.concat_channels(x_tilde, x)?,
        };
        let mut y = self.proj.apply(g, head_in)?;
        let mut stats = None;
        if let Some(bn) = &self.bn {
            let (z, st) = bn.apply(g, y, training)?;
            y = z;
            stats = st;
        }
        let out = match self.mode {
            FusionMode::Sum => g.add(y, x)?,
            FusionMode::Concat => y,
        };
        Ok((out, stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_print() {
        for m in [FusionMode::Sum, FusionMode::Concat] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("concate".parse::<FusionMode>().is_err());
    }

    #[test]
    fn zero_sum_head_returns_input() {
        let mut rng = Rng::new(1);
        for bn in [false, true] {
            let f = Fusion::<f64>::init(&mut rng, FusionMode::Sum, 3, 2, bn, true);
            let mut g = Graph::new();
            let p = f.bind(&mut g);
            let x = g.leaf(rng.uniform_tensor((2, 3, 2, 2), -1.0, 1.0));
            let xt = g.leaf(rng.uniform_tensor((2, 2, 2, 2), -1.0, 1.0));
            let bound = f.bind_from(&mut ParamCursor::new(&p)).unwrap();
            let (y, _) = bound.apply(&mut g, xt, x, true).unwrap();
            assert!(g.value(y).bit_eq(g.value(x)));
        }
    }

    #[test]
    fn concat_head_width() {
        let mut rng = Rng::new(2);
        let f = Fusion::<f64>::init(&mut rng, FusionMode::Concat, 5, 3, false, false);
        assert_eq!(f.proj.c_in(), 8);
        assert_eq!(f.proj.c_out(), 5);
        assert_eq!(f.macs(10), 10 * 8 * 5);
    }
}
