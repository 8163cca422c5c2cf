use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::module::{Module, ParamCursor};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Matrix, Rng, Scalar, Shape4, Tensor4};

/// Per-site linear map over channels (a 1×1 convolution).
///
/// `weight` has shape `(c_out, c_in, 1, 1)`; `bias`, when present, `(1, c_out, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection1x1<T> {
    pub weight: Tensor4<T>,
    pub bias: Option<Tensor4<T>>,
}

impl<T: Scalar> Projection1x1<T> {
    /// Uniform `±1/sqrt(c_in)` weights and bias.
    pub fn init(rng: &mut Rng, c_in: usize, c_out: usize, bias: bool) -> Self {
        let weight = rng.fan_in_tensor((c_out, c_in, 1, 1), c_in);
        let bias = bias.then(|| rng.fan_in_tensor((1, c_out, 1, 1), c_in));
        Projection1x1 { weight, bias }
    }

    pub fn zeros(c_in: usize, c_out: usize, bias: bool) -> Self {
        Projection1x1 {
            weight: Tensor4::zeros((c_out, c_in, 1, 1)),
            bias: bias.then(|| Tensor4::zeros((1, c_out, 1, 1))),
        }
    }

    pub fn from_matrix(weight: &Matrix<T>, bias: Option<Vec<T>>) -> Result<Self> {
        let (c_out, c_in) = weight.shape();
        let weight = Tensor4::new((c_out, c_in, 1, 1), weight.data().to_vec())?;
        let bias = bias
            .map(|b| Tensor4::new((1, c_out, 1, 1), b))
            .transpose()?;
        Ok(Projection1x1 { weight, bias })
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn weight_matrix(&self) -> Matrix<T> {
        Matrix::new(self.c_out(), self.c_in(), self.weight.data().to_vec())
            .expect("weight is c_out × c_in")
    }

    pub fn bind_from(&self, cur: &mut ParamCursor<'_>) -> Result<BoundProjection> {
        Ok(BoundProjection {
            weight: cur.next_var()?,
            bias: self.bias.as_ref().map(|_| cur.next_var()).transpose()?,
        })
    }
}

impl<T: Scalar> Module<T> for Projection1x1<T> {
    fn params(&self) -> Vec<&Tensor4<T>> {
        std::iter::once(&self.weight)
            .chain(self.bias.as_ref())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }
}

/// Graph handles for a [`Projection1x1`].
#[derive(Debug, Clone, Copy)]
pub struct BoundProjection {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl BoundProjection {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.project(x, self.weight, self.bias)
    }
}

fn check_shapes(x: Shape4, w: Shape4, b: Option<Shape4>) -> Result<()> {
    if w.h != 1 || w.w != 1 || x.c != w.c {
        return Err(Error::dim("project_1x1", x, w));
    }
    if let Some(b) = b {
        if b.numel() != w.n {
            return Err(Error::dim("project_1x1 bias", b, w.n));
        }
    }
    Ok(())
}

fn forward<T: Scalar>(
    x: &Tensor4<T>,
    w: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
) -> Result<Tensor4<T>> {
    let xs = x.shape();
    check_shapes(xs, w.shape(), bias.map(Tensor4::shape))?;
    let (c_in, c_out, hw) = (xs.c, w.shape().n, xs.hw());
    let mut out = Tensor4::zeros(xs.with_c(c_out));
    for b in 0..xs.n {
        let ob = out.batch_mut(b);
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                ob[o * hw..(o + 1) * hw].fill(bv);
            }
        }
        gemm_acc(w.data(), x.batch(b), ob, c_out, c_in, hw);
    }
    Ok(out)
}

/// `y[b,:,i,j] = W · x[b,:,i,j] + bias` at every spatial site.
pub fn project_1x1<T: Scalar>(x: &Tensor4<T>, p: &Projection1x1<T>) -> Result<Tensor4<T>> {
    forward(x, &p.weight, p.bias.as_ref())
}

struct ProjectOp {
    has_bias: bool,
}

impl<T: Scalar> Op<T> for ProjectOp {
    fn name(&self) -> &'static str {
        "project_1x1"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
        let xs = x.shape();
        let (c_in, c_out, hw) = (xs.c, w.shape().n, xs.hw());

        let gx = ctx.needs[0].then(|| {
            let mut gx = Tensor4::zeros(xs);
            for b in 0..xs.n {
                gemm_tn_acc(w.data(), g.batch(b), gx.batch_mut(b), c_in, c_out, hw);
            }
            gx
        });
        let gw = ctx.needs[1].then(|| {
            let mut gw = Tensor4::zeros(w.shape());
            for b in 0..xs.n {
                gemm_nt_acc(g.batch(b), x.batch(b), gw.data_mut(), c_out, hw, c_in);
            }
            gw
        });
        let mut out = vec![gx, gw];
        if self.has_bias {
            let gb = ctx.needs[2].then(|| {
                let mut gb = Tensor4::zeros((1, c_out, 1, 1));
                for b in 0..xs.n {
                    for o in 0..c_out {
                        gb.data_mut()[o] += g.plane(b, o).iter().copied().sum::<T>();
                    }
                }
                gb
            });
            out.push(gb);
        }
        Ok(out)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn project(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = forward(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
        )?;
        let inputs: Vec<Var> = [x, weight].into_iter().chain(bias).collect();
        Ok(self.record_with(out, &inputs, || ProjectOp {
            has_bias: bias.is_some(),
        }))
    }
}
