use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Stacks `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::dim("concat_channels", sa, sb));
    }
    let mut data = Vec::with_capacity(sa.numel() + sb.numel());
    for batch in 0..sa.n {
        data.extend_from_slice(a.batch(batch));
        data.extend_from_slice(b.batch(batch));
    }
    Tensor4::new(sa.with_c(sa.c + sb.c), data)
}

struct ConcatOp;

impl<T: Scalar> Op<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (sa, sb) = (ctx.inputs[0].shape(), ctx.inputs[1].shape());
        let la = sa.c * sa.hw();
        let mut ga = Vec::with_capacity(sa.numel());
        let mut gb = Vec::with_capacity(sb.numel());
        for batch in 0..sa.n {
            let chunk = g.batch(batch);
            ga.extend_from_slice(&chunk[..la]);
            gb.extend_from_slice(&chunk[la..]);
        }
        Ok(vec![
            Some(Tensor4::new(sa, ga)?),
            Some(Tensor4::new(sb, gb)?),
        ])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_channels(self.value(a), self.value(b))?;
        Ok(self.record_with(out, &[a, b], || ConcatOp))
    }
}
