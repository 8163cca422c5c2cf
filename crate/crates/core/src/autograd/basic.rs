//! Elementwise arithmetic and reductions.

use super::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape4, Tensor4};

struct AddOp;

impl<T: Scalar> Op<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &BackwardCtx<'_, T>, g: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    }
}

struct MulOp;

impl<T: Scalar> Op<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let ga = ctx.needs[0]
            .then(|| g.zip_map(b, |g, b| g * b))
            .transpose()?;
        let gb = ctx.needs[1]
            .then(|| g.zip_map(a, |g, a| g * a))
            .transpose()?;
        Ok(vec![ga, gb])
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> Op<T> for ScaleOp<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &BackwardCtx<'_, T>, g: &Tensor4<T>) -> Result<Vec<Option<Tensor4<T>>>> {
        let s = self.0;
        Ok(vec![Some(g.map(|v| v * s))])
    }
}

struct SumOp;

impl<T: Scalar> Op<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        Ok(vec![Some(Tensor4::full(
            ctx.inputs[0].shape(),
            g.data()[0],
        ))])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.record_with(out, &[a, b], || AddOp))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.record_with(out, &[a, b], || MulOp))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.record_with(out, &[a], || ScaleOp(s))
    }

    /// Sum of all elements as a `(1,1,1,1)` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor4::scalar(self.value(a).sum());
        self.record_with(out, &[a], || SumOp)
    }

    /// `sum(a ⊙ weights)` with `weights` held constant: the usual probe loss
    /// for gradient checks.
    pub fn weighted_sum(&mut self, a: Var, weights: &Tensor4<T>) -> Result<Var> {
        if self.value(a).shape() != weights.shape() {
            return Err(Error::dim(
                "weighted_sum",
                self.value(a).shape(),
                weights.shape(),
            ));
        }
        let w = self.constant(weights.clone());
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }

    pub fn shape_of(&self, v: Var) -> Shape4 {
        self.value(v).shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Rng::new(1).uniform_tensor((2, 3, 4, 5), -1.0, 1.0));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap(), &Tensor4::ones((2, 3, 4, 5)));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut g = Graph::<f64>::new();
        let xv: Tensor4<f64> = Rng::new(2).uniform_tensor((1, 2, 3, 3), -1.0, 1.0);
        let x = g.leaf(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().max_abs_diff(&xv).unwrap() < 1e-15);
    }

    #[test]
    fn untouched_leaf_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor4::ones((1, 1, 2, 2)));
        let y = g.leaf(Tensor4::ones((1, 3, 1, 1)));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(y).unwrap(), &Tensor4::zeros((1, 3, 1, 1)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor4::ones((1, 1, 2, 2)));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn missing_backward_rule_is_unsupported() {
        struct Opaque;
        impl Op<f64> for Opaque {
            fn name(&self) -> &'static str {
                "opaque"
            }
        }
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor4::ones((1, 1, 1, 1)));
        let y = g.push_op(Tensor4::ones((1, 1, 1, 1)), &[x], Box::new(Opaque));
        assert!(matches!(g.backward(y), Err(Error::UnsupportedOp("opaque"))));
    }

    #[test]
    fn linearity_of_gradients() {
        let xv: Tensor4<f64> = Rng::new(3).uniform_tensor((1, 2, 2, 2), -1.0, 1.0);
        let run = |which: u8| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(xv.clone());
            let sq = g.mul(x, x).unwrap();
            let a = g.sum(sq);
            let b = g.scale(x, 3.0);
            let b = g.sum(b);
            let l = match which {
                0 => a,
                1 => b,
                _ => g.add(a, b).unwrap(),
            };
            g.backward(l).unwrap().wrt(x).unwrap().clone()
        };
        let mut sum = run(0);
        sum.add_assign(&run(1)).unwrap();
        assert!(sum.max_abs_diff(&run(2)).unwrap() < 1e-14);
    }

    #[test]
    fn no_grad_graph_cannot_backprop_into_leaves() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.leaf(Tensor4::ones((1, 1, 1, 1)));
        let l = g.scale(x, 2.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0]);
    }
}
