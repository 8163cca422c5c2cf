use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor4};

pub fn relu<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

struct ReluOp;

impl<T: Scalar> Op<T> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let gx = ctx
            .output
            .zip_map(g, |y, g| if y > T::zero() { g } else { T::zero() })?;
        Ok(vec![Some(gx)])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = relu(self.value(x));
        self.record_with(out, &[x], || ReluOp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_negatives() {
        let x = Tensor4::<f64>::new((1, 1, 1, 3), vec![-1.0, 2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 0.0]);
    }
}
