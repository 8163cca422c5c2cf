use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::ops::softmax_in_place;
use crate::tensor::{Matrix, Scalar, Tensor4};

use super::sample::{from_node_major, grid_extent, to_node_major, RepresentativeSet};

/// Softmax weights over each query's `S` samples.
///
/// One row per `(batch, group, query)`; with a single group this is the
/// `n × N × S` tensor of the plain layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    batch: usize,
    groups: usize,
    nodes: usize,
    s: usize,
    data: Vec<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// `(batch, groups, nodes, S)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.groups, self.nodes, self.s)
    }

    pub fn row(&self, b: usize, group: usize, i: usize) -> &[T] {
        let at = ((b * self.groups + group) * self.nodes + i) * self.s;
        &self.data[at..at + self.s]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks(self.s)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Largest `|Σ row − 1|`, accumulated in `f64`.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows()
            .map(|r| (r.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// All rows stacked into a `(batch·groups·nodes) × S` matrix.
    pub fn to_matrix(&self) -> Matrix<T> {
        Matrix::new(self.data.len() / self.s, self.s, self.data.clone()).expect("rows of length S")
    }
}

fn check<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    gs: usize,
    groups: usize,
) -> Result<()> {
    let (qs, ks) = (q.shape(), k.shape());
    if ks != v.shape() {
        return Err(Error::dim("repgraph_attention keys/values", ks, v.shape()));
    }
    if gs == 0 {
        return Err(Error::contract("grid size must be at least 1"));
    }
    super::config::check_groups(qs.c, groups)?;
    let (hg, wg) = grid_extent(qs.h, qs.w, gs);
    if ks.n != qs.n || ks.w != qs.c || ks.c != hg * wg || ks.h == 0 {
        return Err(Error::dim("repgraph_attention", qs, ks));
    }
    Ok(())
}

/// Site on the `gs`-grid that query `i` of an `h × w` map reads from.
#[inline]
fn site_of(i: usize, w: usize, gs: usize, wg: usize) -> usize {
    (i / w / gs) * wg + (i % w) / gs
}

/// Per query: logits against its site's `S` keys within each channel group,
/// softmax, weighted sum of the matching values.
///
/// `q` is `(n, C', h, w)`; `k` and `v` are site-major `(n, sites, S, C')`
/// with sites on the `gs`-grid.
fn attention_kernel<T: Scalar>(
    q: &Tensor4<T>,
    k: &Tensor4<T>,
    v: &Tensor4<T>,
    gs: usize,
    groups: usize,
) -> (Tensor4<T>, AttentionWeights<T>) {
    let qs = q.shape();
    let (s, sites) = (k.shape().h, k.shape().c);
    let (_, wg) = grid_extent(qs.h, qs.w, gs);
    let (cp, nodes) = (qs.c, qs.hw());
    let cg = cp / groups;
    let qn = to_node_major(q);
    let mut outn = vec![T::zero(); qn.len()];
    let mut data = vec![T::zero(); qs.n * groups * nodes * s];
    let block = s * cp;
    for b in 0..qs.n {
        let kb = &k.data()[b * sites * block..(b + 1) * sites * block];
        let vb = &v.data()[b * sites * block..(b + 1) * sites * block];
        for i in 0..nodes {
            let site = site_of(i, qs.w, gs, wg);
            let (ks, vs) = (
                &kb[site * block..(site + 1) * block],
                &vb[site * block..(site + 1) * block],
            );
            let qi = &qn[(b * nodes + i) * cp..(b * nodes + i + 1) * cp];
            let oi = &mut outn[(b * nodes + i) * cp..(b * nodes + i + 1) * cp];
            for gr in 0..groups {
                let chans = gr * cg..(gr + 1) * cg;
                let at = ((b * groups + gr) * nodes + i) * s;
                let w = &mut data[at..at + s];
                for (kk, wk) in w.iter_mut().enumerate() {
                    let key = &ks[kk * cp..(kk + 1) * cp];
                    *wk = qi[chans.clone()]
                        .iter()
                        .zip(&key[chans.clone()])
                        .map(|(&a, &c)| a * c)
                        .sum();
                }
                softmax_in_place(w);
                for (kk, &wk) in w.iter().enumerate() {
                    let val = &vs[kk * cp..(kk + 1) * cp];
                    for (o, &x) in oi[chans.clone()].iter_mut().zip(&val[chans.clone()]) {
                        *o += wk * x;
                    }
                }
            }
        }
    }
    let weights = AttentionWeights {
        batch: qs.n,
        groups,
        nodes,
        s,
        data,
    };
    (from_node_major(&outn, qs), weights)
}

/// Sparse attention of node-major queries (`N × C'`, `N = n·sites`) over
/// their own sampled keys and values.
pub fn repgraph_attention<T: Scalar>(
    x_theta: &Matrix<T>,
    key_set: &RepresentativeSet<T>,
    value_set: &RepresentativeSet<T>,
) -> Result<(Matrix<T>, AttentionWeights<T>)> {
    if key_set.features.shape() != value_set.features.shape() {
        return Err(Error::dim(
            "repgraph_attention keys/values",
            key_set.features.shape(),
            value_set.features.shape(),
        ));
    }
    let ks = key_set.features.shape();
    let (nodes, cp) = x_theta.shape();
    let sites = key_set.sites();
    if sites == 0 || nodes != ks.n * sites {
        return Err(Error::dim("repgraph_attention", x_theta.shape(), ks));
    }
    let q = Tensor4::from_fn((ks.n, cp, 1, sites), |b, c, _, j| {
        x_theta.get(b * sites + j, c)
    });
    check(&q, &key_set.features, &value_set.features, 1, 1)?;
    let (out, weights) = attention_kernel(&q, &key_set.features, &value_set.features, 1, 1);
    let m = Matrix::from_fn(nodes, cp, |r, c| out.at(r / sites, c, 0, r % sites));
    Ok((m, weights))
}

struct SparseAttentionOp<T> {
    gs: usize,
    weights: AttentionWeights<T>,
}

impl<T: Scalar> Op<T> for SparseAttentionOp<T> {
    fn name(&self) -> &'static str {
        "sparse_attention"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        grad: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (q, k, v) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
        let qs = q.shape();
        let (s, sites) = (k.shape().h, k.shape().c);
        let (_, wg) = grid_extent(qs.h, qs.w, self.gs);
        let (cp, nodes, groups) = (qs.c, qs.hw(), self.weights.groups);
        let cg = cp / groups;
        let qn = to_node_major(q);
        let gn = to_node_major(grad);
        let mut dqn = vec![T::zero(); qn.len()];
        let mut dk = Tensor4::zeros(k.shape());
        let mut dv = Tensor4::zeros(v.shape());
        let mut dw = vec![T::zero(); s];
        let block = s * cp;
        for b in 0..qs.n {
            let base = b * sites * block;
            for i in 0..nodes {
                let site = site_of(i, qs.w, self.gs, wg);
                let at = base + site * block;
                let row = (b * nodes + i) * cp;
                let (qi, gi) = (&qn[row..row + cp], &gn[row..row + cp]);
                for gr in 0..groups {
                    let w = self.weights.row(b, gr, i);
                    let chans = gr * cg..(gr + 1) * cg;
                    for (kk, d) in dw.iter_mut().enumerate() {
                        let off = at + kk * cp;
                        let val = &v.data()[off..off + cp];
                        *d = gi[chans.clone()]
                            .iter()
                            .zip(&val[chans.clone()])
                            .map(|(&a, &c)| a * c)
                            .sum();
                        for (dvv, &gv) in dv.data_mut()[off..off + cp][chans.clone()]
                            .iter_mut()
                            .zip(&gi[chans.clone()])
                        {
                            *dvv += w[kk] * gv;
                        }
                    }
                    let dot: T = w.iter().zip(&dw).map(|(&a, &d)| a * d).sum();
                    for kk in 0..s {
                        let dl = w[kk] * (dw[kk] - dot);
                        let off = at + kk * cp;
                        let key = &k.data()[off..off + cp];
                        for (dq, &kv) in dqn[row..row + cp][chans.clone()]
                            .iter_mut()
                            .zip(&key[chans.clone()])
                        {
                            *dq += dl * kv;
                        }
                        for (dkv, &qv) in dk.data_mut()[off..off + cp][chans.clone()]
                            .iter_mut()
                            .zip(&qi[chans.clone()])
                        {
                            *dkv += dl * qv;
                        }
                    }
                }
            }
        }
        Ok(vec![Some(from_node_major(&dqn, qs)), Some(dk), Some(dv)])
    }
}

impl<T: Scalar> Graph<T> {
    /// Sparse attention of full-resolution queries `q` over sampled keys `k`
    /// and values `v` (outputs of [`Graph::sample_representative`]).
    pub fn sparse_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        gs: usize,
        groups: usize,
    ) -> Result<(Var, AttentionWeights<T>)> {
        check(self.value(q), self.value(k), self.value(v), gs, groups)?;
        let (out, weights) =
            attention_kernel(self.value(q), self.value(k), self.value(v), gs, groups);
        let kept = weights.clone();
        let var = self.record_with(out, &[q, k, v], || SparseAttentionOp { gs, weights: kept });
        Ok((var, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repgraph::{sample_representative, OffsetField};
    use crate::tensor::Rng;

    /// Random set with `S` samples of `c` channels at `sites` sites.
    fn set(rng: &mut Rng, s: usize, c: usize, sites: usize) -> RepresentativeSet<f64> {
        RepresentativeSet::from_fn(1, s, c, sites, |_, _, _, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn single_sample_returns_value() {
        let mut rng = Rng::new(1);
        let q = Matrix::from_fn(6, 3, |_, _| rng.uniform(-1.0, 1.0));
        let k = set(&mut rng, 1, 3, 6);
        let v = set(&mut rng, 1, 3, 6);
        let (xt, w) = repgraph_attention(&q, &k, &v).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        for i in 0..6 {
            for c in 0..3 {
                assert_eq!(xt.get(i, c), v.get(0, 0, c, i));
            }
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = Rng::new(2);
        let q = Matrix::<f64>::zeros(4, 2);
        let k = set(&mut rng, 5, 2, 4);
        let v = set(&mut rng, 5, 2, 4);
        let (xt, w) = repgraph_attention(&q, &k, &v).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.2).abs() < 1e-15));
        for i in 0..4 {
            for c in 0..2 {
                let mean = (0..5).map(|kk| v.get(0, kk, c, i)).sum::<f64>() / 5.0;
                assert!((xt.get(i, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logits_match_explicit_dot_products() {
        let mut rng = Rng::new(3);
        let x: Tensor4<f64> = rng.uniform_tensor((2, 3, 3, 3), -1.0, 1.0);
        let off = OffsetField::new(rng.uniform_tensor((2, 8, 3, 3), -2.0, 2.0)).unwrap();
        let ks = sample_representative(&x, &off).unwrap();
        let q = Matrix::from_fn(18, 3, |_, _| rng.uniform(-1.0, 1.0));
        let (xt, w) = repgraph_attention(&q, &ks, &ks).unwrap();
        for r in 0..18 {
            let (b, site) = (r / 9, r % 9);
            let logits: Vec<f64> = (0..4)
                .map(|k| (0..3).map(|c| q.get(r, c) * ks.get(b, k, c, site)).sum())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (k, l) in logits.iter().enumerate() {
                assert!((w.row(b, 0, site)[k] - l.exp() / z).abs() < 1e-14);
            }
            for c in 0..3 {
                let want: f64 = (0..4)
                    .map(|k| logits[k].exp() / z * ks.get(b, k, c, site))
                    .sum();
                assert!((xt.get(r, c) - want).abs() < 1e-14);
            }
        }
        assert!(w.max_row_sum_error() < 1e-12);
    }

    #[test]
    fn mismatched_sets() {
        let q = Matrix::<f64>::zeros(4, 2);
        let mut rng = Rng::new(4);
        let k = set(&mut rng, 3, 2, 4);
        let v = set(&mut rng, 2, 2, 4);
        assert!(matches!(
            repgraph_attention(&q, &k, &v),
            Err(Error::Dimension { .. })
        ));
    }
}
