//! Dense non-local attention: every position attends to every other one.

use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionMode};
use crate::module::{apply_bn_stats, Layer, LayerOutput, Mode, Module, ParamCursor};
use crate::ops::{softmax_in_place, softmax_rows, BatchStats, Projection1x1};
use crate::tensor::{
    gemm_acc, gemm_nt_acc, gemm_tn_acc, matmul, reshape_nodes, Matrix, Rng, Scalar, Tensor4,
};

/// Query rows processed per block; bounds the live logits to `ROWS × N`.
const ROWS: usize = 64;

/// Embedded-softmax non-local block: `θ, φ, g: C → C'` and a fusion head.
///
/// Softmax is the only normalizer (no extra `1/C(x)` factor).
#[derive(Debug, Clone, PartialEq)]
pub struct NonLocalParams<T> {
    pub theta: Projection1x1<T>,
    pub phi: Projection1x1<T>,
    pub g: Projection1x1<T>,
    pub fusion: Fusion<T>,
}

impl<T: Scalar> NonLocalParams<T> {
    /// Random projections. `zero_head` zero-initializes the output projection
    /// so the block starts as the identity (sum fusion only).
    pub fn init(
        rng: &mut Rng,
        c: usize,
        cp: usize,
        fusion: FusionMode,
        zero_head: bool,
    ) -> Result<Self> {
        if c == 0 || cp == 0 {
            return Err(Error::contract("non-local widths must be positive"));
        }
        if zero_head && fusion == FusionMode::Concat {
            return Err(Error::contract("a zero-initialized head needs sum fusion"));
        }
        Ok(NonLocalParams {
            theta: Projection1x1::init(rng, c, cp, true),
            phi: Projection1x1::init(rng, c, cp, true),
            g: Projection1x1::init(rng, c, cp, true),
            fusion: Fusion::init(rng, fusion, c, cp, false, zero_head),
        })
    }

    pub fn c(&self) -> usize {
        self.theta.c_in()
    }

    pub fn cp(&self) -> usize {
        self.theta.c_out()
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        if x.shape().c != self.c() {
            return Err(Error::dim("nonlocal_forward", x.shape(), self.c()));
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for NonLocalParams<T> {
    fn params(&self) -> Vec<&Tensor4<T>> {
        let mut v = self.theta.params();
        v.extend(self.phi.params());
        v.extend(self.g.params());
        v.extend(self.fusion.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut v = self.theta.params_mut();
        v.extend(self.phi.params_mut());
        v.extend(self.g.params_mut());
        v.extend(self.fusion.params_mut());
        v
    }
}

impl<T: Scalar> Layer<T> for NonLocalParams<T> {
    fn channels(&self) -> usize {
        self.c()
    }

    fn forward_with(
        &self,
        g: &mut Graph<T>,
        x: Var,
        params: &[Var],
        mode: Mode,
    ) -> Result<LayerOutput<T>> {
        self.check_input(g.value(x))?;
        let mut cur = ParamCursor::new(params);
        let theta = self.theta.bind_from(&mut cur)?;
        let phi = self.phi.bind_from(&mut cur)?;
        let gp = self.g.bind_from(&mut cur)?;
        let fusion = self.fusion.bind_from(&mut cur)?;
        cur.finish()?;

        let q = theta.apply(g, x)?;
        let k = phi.apply(g, x)?;
        let v = gp.apply(g, x)?;
        let xt = g.dense_attention(q, k, v)?;
        let (out, stats) = fusion.apply(g, xt, x, mode.training())?;
        let mut res = LayerOutput::plain(out);
        res.bn_stats.extend(stats);
        Ok(res)
    }

    fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        apply_bn_stats(self.fusion.bn.iter_mut().collect(), stats)
    }
}

/// `softmax_rows(x_theta · x_phiᵀ)` for node-major `N × C'` inputs.
pub fn affinity_matrix<T: Scalar>(x_theta: &Matrix<T>, x_phi: &Matrix<T>) -> Result<Matrix<T>> {
    if x_theta.cols() != x_phi.cols() {
        return Err(Error::dim(
            "affinity_matrix",
            x_theta.shape(),
            x_phi.shape(),
        ));
    }
    Ok(softmax_rows(&matmul(x_theta, &x_phi.transpose())?))
}

/// Block output for `x` in eval mode.
pub fn nonlocal_forward<T: Scalar>(x: &Tensor4<T>, p: &NonLocalParams<T>) -> Result<Tensor4<T>> {
    p.forward(x)
}

/// The `N × N` affinity matrix of every batch element.
pub fn nonlocal_affinity<T: Scalar>(
    x: &Tensor4<T>,
    p: &NonLocalParams<T>,
) -> Result<Vec<Matrix<T>>> {
    p.check_input(x)?;
    let q = reshape_nodes(&crate::ops::project_1x1(x, &p.theta)?);
    let k = reshape_nodes(&crate::ops::project_1x1(x, &p.phi)?);
    let nodes = x.shape().hw();
    (0..x.shape().n)
        .map(|b| {
            let rows = |m: &Matrix<T>| {
                Matrix::new(
                    nodes,
                    m.cols(),
                    m.data()[b * nodes * m.cols()..(b + 1) * nodes * m.cols()].to_vec(),
                )
            };
            affinity_matrix(&rows(&q)?, &rows(&k)?)
        })
        .collect()
}

fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `x̃ = softmax(θᵀφ) gᵀ` per batch element, all inputs `(n, C', h, w)`.
///
/// Works through blocks of query rows so the full affinity matrix is only
/// materialized when `keep` asks for it (`n × N × N`, row-major).
fn dense_attention_kernel<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    mut keep: Option<&mut Vec<T>>,
) -> Result<Tensor4<T>> {
    let s = q.shape();
    if k.shape() != s || v.shape() != s {
        return Err(Error::dim("dense_attention", s, k.shape()));
    }
    let (cp, n) = (s.c, s.hw());
    if let Some(keep) = keep.as_deref_mut() {
        keep.clear();
        keep.resize(s.n * n * n, T::zero());
    }
    let mut out = Tensor4::zeros(s);
    let mut qn = vec![T::zero(); n * cp];
    let mut vn = vec![T::zero(); n * cp];
    let mut logits = vec![T::zero(); ROWS.min(n) * n];
    let mut agg = vec![T::zero(); ROWS.min(n) * cp];
    for b in 0..s.n {
        transpose_into(q.batch(b), cp, n, &mut qn);
        transpose_into(v.batch(b), cp, n, &mut vn);
        let kb = k.batch(b);
        let ob = out.batch_mut(b);
        for i0 in (0..n).step_by(ROWS) {
            let rows = ROWS.min(n - i0);
            let lg = &mut logits[..rows * n];
            lg.fill(T::zero());
            gemm_acc(&qn[i0 * cp..(i0 + rows) * cp], kb, lg, rows, cp, n);
            for row in lg.chunks_mut(n) {
                softmax_in_place(row);
            }
            if let Some(keep) = keep.as_deref_mut() {
                let at = (b * n + i0) * n;
                keep[at..at + rows * n].copy_from_slice(lg);
            }
            let ag = &mut agg[..rows * cp];
            ag.fill(T::zero());
            gemm_acc(lg, &vn, ag, rows, n, cp);
            for r in 0..rows {
                for c in 0..cp {
                    ob[c * n + i0 + r] = ag[r * cp + c];
                }
            }
        }
    }
    Ok(out)
}

struct DenseAttentionOp<T> {
    /// `n × N × N` affinity rows.
    affinity: Vec<T>,
}

impl<T: Scalar> Op<T> for DenseAttentionOp<T> {
    fn name(&self) -> &'static str {
        "dense_attention"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        grad: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (q, k, v) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let s = q.shape();
        let (cp, n) = (s.c, s.hw());
        let mut dq = Tensor4::zeros(s);
        let mut dk = Tensor4::zeros(s);
        let mut dv = Tensor4::zeros(s);
        let mut da = vec![T::zero(); n * n];
        for b in 0..s.n {
            let a = &self.affinity[b * n * n..(b + 1) * n * n];
            let gb = grad.batch(b);
            da.fill(T::zero());
            gemm_tn_acc(gb, v.batch(b), &mut da, n, cp, n);
            gemm_acc(gb, a, dv.batch_mut(b), cp, n, n);
            for (arow, drow) in a.chunks(n).zip(da.chunks_mut(n)) {
                let dot: T = arow.iter().zip(drow.iter()).map(|(&x, &y)| x * y).sum();
                for (d, &w) in drow.iter_mut().zip(arow) {
                    *d = w * (*d - dot);
                }
            }
            gemm_nt_acc(k.batch(b), &da, dq.batch_mut(b), cp, n, n);
            gemm_acc(q.batch(b), &da, dk.batch_mut(b), cp, n, n);
        }
        Ok(vec![Some(dq), Some(dk), Some(dv)])
    }
}

impl<T: Scalar> Graph<T> {
    /// Dense softmax attention over all positions of each batch element.
    pub fn dense_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let needs = self.is_recording() && [q, k, v].iter().any(|&x| self.requires_grad(x));
        let mut keep = Vec::new();
        let out = dense_attention_kernel(
            self.value(q),
            self.value(k),
            self.value(v),
            needs.then_some(&mut keep),
        )?;
        Ok(self.record_with(out, &[q, k, v], || DenseAttentionOp { affinity: keep }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::project_1x1;

    #[test]
    fn zero_inputs_give_uniform_rows() {
        let z = Matrix::<f64>::zeros(5, 3);
        let a = affinity_matrix(&z, &z).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let one = Matrix::<f64>::zeros(1, 3);
        assert_eq!(affinity_matrix(&one, &one).unwrap().data(), &[1.0]);
        assert!(affinity_matrix(&Matrix::<f64>::zeros(2, 3), &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn affinity_matches_pairwise_loop() {
        let mut rng = Rng::new(5);
        let t = Matrix::<f64>::from_fn(6, 4, |_, _| rng.uniform(-1.0, 1.0));
        let p = Matrix::<f64>::from_fn(6, 4, |_, _| rng.uniform(-1.0, 1.0));
        let a = affinity_matrix(&t, &p).unwrap();
        for i in 0..6 {
            let logits: Vec<f64> = (0..6)
                .map(|j| (0..4).map(|c| t.get(i, c) * p.get(j, c)).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (j, l) in logits.iter().enumerate() {
                assert!((a.get(i, j) - l.exp() / z).abs() < 1e-14);
            }
            assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blocked_kernel_matches_affinity_product() {
        // 70 nodes spans two row blocks.
        let mut rng = Rng::new(6);
        let p = NonLocalParams::<f64>::init(&mut rng, 3, 2, FusionMode::Sum, false).unwrap();
        let x: Tensor4<f64> = rng.uniform_tensor((2, 3, 7, 10), -1.0, 1.0);
        let q = project_1x1(&x, &p.theta).unwrap();
        let k = project_1x1(&x, &p.phi).unwrap();
        let v = project_1x1(&x, &p.g).unwrap();
        let mut keep = Vec::new();
        let xt = dense_attention_kernel(&q, &k, &v, Some(&mut keep)).unwrap();
        let aff = nonlocal_affinity(&x, &p).unwrap();
        let vn = reshape_nodes(&v);
        for b in 0..2 {
            assert!(aff[b]
                .data()
                .iter()
                .zip(&keep[b * 4900..(b + 1) * 4900])
                .all(|(a, k)| (a - k).abs() < 1e-14));
            let vb = Matrix::new(70, 2, vn.data()[b * 140..(b + 1) * 140].to_vec()).unwrap();
            let want = matmul(&aff[b], &vb).unwrap();
            for i in 0..70 {
                for c in 0..2 {
                    assert!((xt.plane(b, c)[i] - want.get(i, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_head_is_identity() {
        let mut rng = Rng::new(7);
        let p = NonLocalParams::<f64>::init(&mut rng, 4, 2, FusionMode::Sum, true).unwrap();
        let x: Tensor4<f64> = rng.uniform_tensor((2, 4, 3, 3), -3.0, 3.0);
        assert!(nonlocal_forward(&x, &p).unwrap().bit_eq(&x));
        assert!(NonLocalParams::<f64>::init(&mut rng, 4, 2, FusionMode::Concat, true).is_err());
    }

    #[test]
    fn single_node_passes_value_through() {
        let mut rng = Rng::new(8);
        let p = NonLocalParams::<f64>::init(&mut rng, 3, 2, FusionMode::Sum, false).unwrap();
        let x: Tensor4<f64> = rng.uniform_tensor((1, 3, 1, 1), -1.0, 1.0);
        let gx = project_1x1(&x, &p.g).unwrap();
        let mut want = project_1x1(&gx, &p.fusion.proj).unwrap();
        want.add_assign(&x).unwrap();
        assert!(
            nonlocal_forward(&x, &p)
                .unwrap()
                .max_abs_diff(&want)
                .unwrap()
                < 1e-15
        );
    }

    #[test]
    fn channel_mismatch() {
        let mut rng = Rng::new(9);
        let p = NonLocalParams::<f64>::init(&mut rng, 3, 2, FusionMode::Sum, false).unwrap();
        assert!(matches!(
            nonlocal_forward(&Tensor4::zeros((1, 4, 2, 2)), &p),
            Err(Error::Dimension { .. })
        ));
    }
}
