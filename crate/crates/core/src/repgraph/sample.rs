use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::ops::taps;
use crate::tensor::{Scalar, Tensor4};

use super::OffsetField;

/// Sampled features of one branch.
///
/// Stored site-major: `features` has shape `(n, sites, S, C)` so the `S × C`
/// block a query reads is contiguous; [`RepresentativeSet::get`] indexes it
/// as `[b, k, c, site]`. `positions` has shape `(n, sites, S, 2)` and holds
/// the `(y, x)` each sample was read from.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentativeSet<T> {
    pub features: Tensor4<T>,
    pub positions: Tensor4<T>,
}

impl<T: Scalar> RepresentativeSet<T> {
    /// Builds a set from `f(b, k, c, site)`; positions are left at zero.
    pub fn from_fn(
        n: usize,
        s: usize,
        c: usize,
        sites: usize,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        RepresentativeSet {
            features: Tensor4::from_fn((n, sites, s, c), |b, site, k, ch| f(b, k, ch, site)),
            positions: Tensor4::zeros((n, sites, s, 2)),
        }
    }

    pub fn s(&self) -> usize {
        self.features.shape().h
    }

    pub fn channels(&self) -> usize {
        self.features.shape().w
    }

    pub fn sites(&self) -> usize {
        self.features.shape().c
    }

    /// Channel `c` of sample `k` for query site `site`.
    pub fn get(&self, b: usize, k: usize, c: usize, site: usize) -> T {
        self.features.at(b, site, k, c)
    }

    /// `(y, x)` of sample `k` for `site`.
    pub fn position(&self, b: usize, k: usize, site: usize) -> (T, T) {
        (
            self.positions.at(b, site, k, 0),
            self.positions.at(b, site, k, 1),
        )
    }

    /// Sample `k` of `site`, all channels.
    pub fn sample(&self, b: usize, k: usize, site: usize) -> &[T] {
        let (sites, s, c) = (self.sites(), self.s(), self.channels());
        let at = ((b * sites + site) * s + k) * c;
        &self.features.data()[at..at + c]
    }
}

pub(crate) fn grid_extent(h: usize, w: usize, gs: usize) -> (usize, usize) {
    (h.div_ceil(gs), w.div_ceil(gs))
}

fn check<T: Scalar>(x: &Tensor4<T>, off: &Tensor4<T>, gs: usize) -> Result<()> {
    if gs == 0 {
        return Err(Error::contract("grid size must be at least 1"));
    }
    let (xs, os) = (x.shape(), off.shape());
    let (hg, wg) = grid_extent(xs.h, xs.w, gs);
    if os.n != xs.n || os.c == 0 || os.c % 2 != 0 || os.h != hg || os.w != wg {
        return Err(Error::dim("sample_representative", xs, os));
    }
    Ok(())
}

/// Per batch element, `(hw, C)` copy of a channel-major `(C, hw)` block.
pub(crate) fn to_node_major<T: Scalar>(x: &Tensor4<T>) -> Vec<T> {
    let s = x.shape();
    let (c, hw) = (s.c, s.hw());
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..s.n {
        let src = x.batch(b);
        let dst = &mut out[b * c * hw..(b + 1) * c * hw];
        for ch in 0..c {
            for (site, &v) in src[ch * hw..(ch + 1) * hw].iter().enumerate() {
                dst[site * c + ch] = v;
            }
        }
    }
    out
}

/// Inverse of [`to_node_major`].
pub(crate) fn from_node_major<T: Scalar>(nm: &[T], shape: crate::tensor::Shape4) -> Tensor4<T> {
    let (c, hw) = (shape.c, shape.hw());
    let mut out = Tensor4::zeros(shape);
    for b in 0..shape.n {
        let src = &nm[b * c * hw..(b + 1) * c * hw];
        let dst = out.batch_mut(b);
        for site in 0..hw {
            for ch in 0..c {
                dst[ch * hw + site] = src[site * c + ch];
            }
        }
    }
    out
}

#[inline]
fn anchor<T: Scalar>(site: usize, wg: usize, gs: usize) -> (T, T) {
    (
        T::of(((site / wg) * gs) as f64),
        T::of(((site % wg) * gs) as f64),
    )
}

/// Sampling kernel. Offsets live on the `⌈h/gs⌉ × ⌈w/gs⌉` grid and are
/// applied at each cell's top-left anchor.
fn sample_kernel<T: Scalar>(
    x: &Tensor4<T>,
    off: &Tensor4<T>,
    gs: usize,
    mut positions: Option<&mut Tensor4<T>>,
) -> Tensor4<T> {
    let (xs, os) = (x.shape(), off.shape());
    let (s, wg, sites, c) = (os.c / 2, os.w, os.hw(), xs.c);
    let xn = to_node_major(x);
    let mut out = Tensor4::zeros((xs.n, sites, s, c));
    let hw = xs.hw();
    for b in 0..xs.n {
        let xb = &xn[b * hw * c..(b + 1) * hw * c];
        let ob = out.batch_mut(b);
        for site in 0..sites {
            let (ay, ax) = anchor::<T>(site, wg, gs);
            for k in 0..s {
                let py = ay + off.plane(b, 2 * k)[site];
                let px = ax + off.plane(b, 2 * k + 1)[site];
                if let Some(p) = positions.as_deref_mut() {
                    *p.at_mut(b, site, k, 0) = py;
                    *p.at_mut(b, site, k, 1) = px;
                }
                let (tp, nt) = taps(py, px, xs.h, xs.w);
                let row = &mut ob[(site * s + k) * c..(site * s + k + 1) * c];
                for t in &tp[..nt] {
                    let src = &xb[t.idx * c..(t.idx + 1) * c];
                    for (o, &v) in row.iter_mut().zip(src) {
                        *o += t.weight * v;
                    }
                }
            }
        }
    }
    out
}

/// Reads `x_branch` at `p + Δp_k` for every query position `p` and sample `k`.
pub fn sample_representative<T: Scalar>(
    x_branch: &Tensor4<T>,
    offsets: &OffsetField<T>,
) -> Result<RepresentativeSet<T>> {
    sample_representative_grid(x_branch, offsets, 1)
}

/// As [`sample_representative`], with one offset set per `gs × gs` cell
/// anchored at the cell's top-left position.
pub fn sample_representative_grid<T: Scalar>(
    x_branch: &Tensor4<T>,
    offsets: &OffsetField<T>,
    gs: usize,
) -> Result<RepresentativeSet<T>> {
    let off = offsets.tensor();
    check(x_branch, off, gs)?;
    let os = off.shape();
    let mut positions = Tensor4::zeros((os.n, os.hw(), os.c / 2, 2));
    let features = sample_kernel(x_branch, off, gs, Some(&mut positions));
    Ok(RepresentativeSet {
        features,
        positions,
    })
}

struct SampleOp {
    gs: usize,
}

impl<T: Scalar> Op<T> for SampleOp {
    fn name(&self) -> &'static str {
        "sample_representative"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        grad: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let (x, off) = (ctx.inputs[0], ctx.inputs[1]);
        let (xs, os) = (x.shape(), off.shape());
        let (s, wg, sites, hw, c) = (os.c / 2, os.w, os.hw(), xs.hw(), xs.c);
        let xn = to_node_major(x);
        let mut dxn = vec![T::zero(); xn.len()];
        let mut doff = Tensor4::zeros(os);
        for b in 0..xs.n {
            let xb = &xn[b * hw * c..(b + 1) * hw * c];
            let dxb = &mut dxn[b * hw * c..(b + 1) * hw * c];
            let gb = grad.batch(b);
            for site in 0..sites {
                let (ay, ax) = anchor::<T>(site, wg, self.gs);
                for k in 0..s {
                    let py = ay + off.plane(b, 2 * k)[site];
                    let px = ax + off.plane(b, 2 * k + 1)[site];
                    let (tp, nt) = taps(py, px, xs.h, xs.w);
                    let go = &gb[(site * s + k) * c..(site * s + k + 1) * c];
                    let (mut gy, mut gx) = (T::zero(), T::zero());
                    for t in &tp[..nt] {
                        let src = &xb[t.idx * c..(t.idx + 1) * c];
                        let dst = &mut dxb[t.idx * c..(t.idx + 1) * c];
                        let mut dot = T::zero();
                        for ((d, &v), &gv) in dst.iter_mut().zip(src).zip(go) {
                            *d += t.weight * gv;
                            dot += v * gv;
                        }
                        gy += t.d_y * dot;
                        gx += t.d_x * dot;
                    }
                    *doff.at_mut(b, 2 * k, site / wg, site % wg) += gy;
                    *doff.at_mut(b, 2 * k + 1, site / wg, site % wg) += gx;
                }
            }
        }
        Ok(vec![Some(from_node_major(&dxn, xs)), Some(doff)])
    }
}

impl<T: Scalar> Graph<T> {
    /// Differentiable sampling: gradients reach both the branch features and
    /// the offsets. The result is laid out like [`RepresentativeSet::features`].
    pub fn sample_representative(&mut self, x: Var, offsets: Var, gs: usize) -> Result<Var> {
        check(self.value(x), self.value(offsets), gs)?;
        let out = sample_kernel(self.value(x), self.value(offsets), gs, None);
        Ok(self.record_with(out, &[x, offsets], || SampleOp { gs }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::bilinear_sample;
    use crate::tensor::Rng;

    #[test]
    fn zero_offsets_sample_self() {
        let x: Tensor4<f64> = Rng::new(1).uniform_tensor((2, 3, 4, 5), -1.0, 1.0);
        let set = sample_representative(&x, &OffsetField::zeros(2, 4, 4, 5)).unwrap();
        for b in 0..2 {
            for k in 0..4 {
                for site in 0..20 {
                    for c in 0..3 {
                        assert_eq!(set.get(b, k, c, site), x.plane(b, c)[site]);
                    }
                }
            }
        }
    }

    #[test]
    fn outside_offsets_read_zero() {
        let x = Tensor4::<f64>::ones((1, 2, 3, 3));
        let off = OffsetField::new(Tensor4::full((1, 2, 3, 3), -10.0)).unwrap();
        let set = sample_representative(&x, &off).unwrap();
        assert!(set.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fractional_offsets_match_bilinear_sampler() {
        let mut rng = Rng::new(2);
        let x: Tensor4<f64> = rng.uniform_tensor((2, 3, 4, 4), -1.0, 1.0);
        let off = OffsetField::new(rng.uniform_tensor((2, 6, 4, 4), -2.5, 2.5)).unwrap();
        let set = sample_representative(&x, &off).unwrap();
        for b in 0..2 {
            for k in 0..3 {
                for i in 0..4 {
                    for j in 0..4 {
                        let (dy, dx) = off.get(b, k, i, j);
                        let (py, px) = (i as f64 + dy, j as f64 + dx);
                        assert_eq!(set.position(b, k, i * 4 + j), (py, px));
                        let want = bilinear_sample(&x, &[(b, py, px)]).unwrap();
                        for c in 0..3 {
                            assert!((set.get(b, k, c, i * 4 + j) - want.get(0, c)).abs() < 1e-14);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn grid_offsets_start_at_anchor() {
        let x: Tensor4<f64> = Rng::new(3).uniform_tensor((1, 1, 5, 5), -1.0, 1.0);
        let set = sample_representative_grid(&x, &OffsetField::zeros(1, 1, 2, 2), 3).unwrap();
        assert_eq!(set.get(0, 0, 0, 3), x.at(0, 0, 3, 3));
        assert_eq!(set.get(0, 0, 0, 1), x.at(0, 0, 0, 3));
        assert!(sample_representative_grid(&x, &OffsetField::zeros(1, 1, 5, 5), 3).is_err());
    }

    #[test]
    fn shape_mismatch() {
        let x = Tensor4::<f64>::zeros((1, 2, 3, 3));
        assert!(matches!(
            sample_representative(&x, &OffsetField::zeros(1, 2, 3, 4)),
            Err(Error::Dimension { .. })
        ));
    }
}
