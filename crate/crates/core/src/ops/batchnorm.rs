use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::module::{Module, ParamCursor};
use crate::tensor::{Scalar, Tensor4};

/// Per-channel batch normalization state.
///
/// `gamma`/`beta` are trainable `(1, c, 1, 1)` tensors; the running
/// statistics are updated only in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Tensor4<T>,
    pub beta: Tensor4<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// `gamma = 1`, `beta = 0`, unit running variance, eps 1e-5, momentum 0.1.
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor4::ones((1, channels, 1, 1)),
            beta: Tensor4::zeros((1, channels, 1, 1)),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps: T::of(1e-5),
            momentum: T::of(0.1),
        }
    }

    /// `gamma = beta = 0`: the block outputs zeros until trained.
    pub fn zeroed(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor4::zeros((1, channels, 1, 1)),
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Running-average update: mean with the batch mean, variance with the
    /// unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        let correction = if stats.count > 1 {
            T::of(stats.count as f64 / (stats.count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * stats.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * stats.var[c] * correction;
        }
    }

    pub fn bind_from(&self, cur: &mut ParamCursor<'_>) -> Result<BoundBatchNorm<T>> {
        Ok(BoundBatchNorm {
            gamma: cur.next_var()?,
            beta: cur.next_var()?,
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            eps: self.eps,
        })
    }
}

impl<T: Scalar> Module<T> for BatchNormParams<T> {
    fn params(&self) -> Vec<&Tensor4<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Batch statistics over `(n, h, w)` per channel; `var` is biased.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

fn batch_stats<T: Scalar>(x: &Tensor4<T>) -> Result<BatchStats<T>> {
    let s = x.shape();
    let count = s.n * s.hw();
    if count == 0 {
        return Err(Error::contract("batch_norm over an empty batch"));
    }
    let inv = T::one() / T::of(count as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for b in 0..s.n {
            acc += x.plane(b, c).iter().copied().sum::<T>();
        }
        let mu = acc * inv;
        let mut sq = T::zero();
        for b in 0..s.n {
            sq += x
                .plane(b, c)
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<T>();
        }
        mean[c] = mu;
        var[c] = sq * inv;
    }
    Ok(BatchStats { mean, var, count })
}

fn normalize<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &Tensor4<T>,
    beta: &Tensor4<T>,
    mean: &[T],
    var: &[T],
    eps: T,
) -> Result<(Tensor4<T>, Vec<T>)> {
    let s = x.shape();
    if gamma.numel() != s.c || beta.numel() != s.c || mean.len() != s.c || var.len() != s.c {
        return Err(Error::dim("batch_norm", s, gamma.shape()));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor4::zeros(s);
    let hw = s.hw();
    for b in 0..s.n {
        for c in 0..s.c {
            let (g, bt, mu, is) = (gamma.data()[c], beta.data()[c], mean[c], inv_std[c]);
            let src = x.plane(b, c);
            let start = (b * s.c + c) * hw;
            for (o, &v) in out.data_mut()[start..start + hw].iter_mut().zip(src) {
                *o = g * ((v - mu) * is) + bt;
            }
        }
    }
    Ok((out, inv_std))
}

/// Batch normalization. Training mode normalizes with batch statistics and
/// updates the running statistics; eval mode uses the running statistics.
pub fn batch_norm<T: Scalar>(
    x: &Tensor4<T>,
    params: &mut BatchNormParams<T>,
    training: bool,
) -> Result<Tensor4<T>> {
    if training {
        let stats = batch_stats(x)?;
        let (out, _) = normalize(
            x,
            &params.gamma,
            &params.beta,
            &stats.mean,
            &stats.var,
            params.eps,
        )?;
        params.update_running(&stats);
        Ok(out)
    } else {
        if x.shape().n == 0 {
            return Err(Error::contract("batch_norm over an empty batch"));
        }
        let (out, _) = normalize(
            x,
            &params.gamma,
            &params.beta,
            &params.running_mean,
            &params.running_var,
            params.eps,
        )?;
        Ok(out)
    }
}

/// Graph handles for a [`BatchNormParams`], with a snapshot of its running
/// statistics for eval mode.
#[derive(Debug, Clone)]
pub struct BoundBatchNorm<T> {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BoundBatchNorm<T> {
    /// Returns the output and, in training mode, the batch statistics the
    /// caller should fold into the running averages.
    pub fn apply(
        &self,
        g: &mut Graph<T>,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if training {
            let (y, stats) = g.batch_norm_train(x, self.gamma, self.beta, self.eps)?;
            Ok((y, Some(stats)))
        } else {
            let y = g.batch_norm_eval(
                x,
                self.gamma,
                self.beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            )?;
            Ok((y, None))
        }
    }
}

struct BatchNormOp<T> {
    mean: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Scalar> Op<T> for BatchNormOp<T> {
    fn name(&self) -> &'static str {
        if self.training {
            "batch_norm_train"
        } else {
            "batch_norm_eval"
        }
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        g: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let x = ctx.inputs[0];
        let gamma = ctx.inputs[1];
        let s = x.shape();
        let hw = s.hw();
        let m = T::of((s.n * hw) as f64);
        let mut gx = Tensor4::zeros(s);
        let mut ggamma = Tensor4::zeros(gamma.shape());
        let mut gbeta = Tensor4::zeros(gamma.shape());
        for c in 0..s.c {
            let (mu, is, gm) = (self.mean[c], self.inv_std[c], gamma.data()[c]);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..s.n {
                for (&gv, &xv) in g.plane(b, c).iter().zip(x.plane(b, c)) {
                    sum_g += gv;
                    sum_gx += gv * (xv - mu) * is;
                }
            }
            gbeta.data_mut()[c] = sum_g;
            ggamma.data_mut()[c] = sum_gx;
            let (mean_g, mean_gx) = (sum_g / m, sum_gx / m);
            for b in 0..s.n {
                let start = (b * s.c + c) * hw;
                let dst = &mut gx.data_mut()[start..start + hw];
                for ((d, &gv), &xv) in dst.iter_mut().zip(g.plane(b, c)).zip(x.plane(b, c)) {
                    *d = if self.training {
                        let xhat = (xv - mu) * is;
                        gm * is * (gv - mean_g - xhat * mean_gx)
                    } else {
                        gm * is * gv
                    };
                }
            }
        }
        Ok(vec![Some(gx), Some(ggamma), Some(gbeta)])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        let stats = batch_stats(self.value(x))?;
        let (out, inv_std) = normalize(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &stats.mean,
            &stats.var,
            eps,
        )?;
        let mean = stats.mean.clone();
        let v = self.record_with(out, &[x, gamma, beta], || BatchNormOp {
            mean,
            inv_std,
            training: true,
        });
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        if self.value(x).shape().n == 0 {
            return Err(Error::contract("batch_norm over an empty batch"));
        }
        let (out, inv_std) = normalize(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let mean = running_mean.to_vec();
        Ok(self.record_with(out, &[x, gamma, beta], || BatchNormOp {
            mean,
            inv_std,
            training: false,
        }))
    }
}
