use crate::autograd::{BackwardCtx, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

fn pooled_extent(n: usize, g: usize) -> usize {
    n.div_ceil(g)
}

/// Mean over `g × g` blocks; blocks at the right and bottom edges may be
/// partial and are averaged over the elements they actually cover.
pub fn avg_pool_grid<T: Scalar>(x: &Tensor4<T>, g: usize) -> Result<Tensor4<T>> {
    if g == 0 {
        return Err(Error::contract("avg_pool_grid needs a block size >= 1"));
    }
    let s = x.shape();
    let (hg, wg) = (pooled_extent(s.h, g), pooled_extent(s.w, g));
    let mut out = Tensor4::zeros((s.n, s.c, hg, wg));
    for b in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(b, c);
            for gi in 0..hg {
                let rows = gi * g..((gi + 1) * g).min(s.h);
                for gj in 0..wg {
                    let cols = gj * g..((gj + 1) * g).min(s.w);
                    let mut acc = T::zero();
                    for i in rows.clone() {
                        for j in cols.clone() {
                            acc += plane[i * s.w + j];
                        }
                    }
                    let count = T::of((rows.len() * cols.len()) as f64);
                    *out.at_mut(b, c, gi, gj) = acc / count;
                }
            }
        }
    }
    Ok(out)
}

struct AvgPoolOp {
    g: usize,
}

impl<T: Scalar> Op<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool_grid"
    }

    fn backward(
        &self,
        ctx: &BackwardCtx<'_, T>,
        grad: &Tensor4<T>,
    ) -> Result<Vec<Option<Tensor4<T>>>> {
        let s = ctx.inputs[0].shape();
        let g = self.g;
        let gx = Tensor4::from_fn(s, |b, c, i, j| {
            let (gi, gj) = (i / g, j / g);
            let rows = ((gi + 1) * g).min(s.h) - gi * g;
            let cols = ((gj + 1) * g).min(s.w) - gj * g;
            grad.at(b, c, gi, gj) / T::of((rows * cols) as f64)
        });
        Ok(vec![Some(gx)])
    }
}

impl<T: Scalar> Graph<T> {
    pub fn avg_pool_grid(&mut self, x: Var, g: usize) -> Result<Var> {
        let out = avg_pool_grid(self.value(x), g)?;
        Ok(self.record_with(out, &[x], || AvgPoolOp { g }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn unit_block_is_identity() {
        let x: Tensor4<f64> = Rng::new(1).uniform_tensor((2, 3, 5, 4), -1.0, 1.0);
        assert!(avg_pool_grid(&x, 1).unwrap().bit_eq(&x));
    }

    #[test]
    fn constant_stays_constant() {
        let x = Tensor4::<f64>::full((1, 2, 5, 7), 0.75);
        let y = avg_pool_grid(&x, 3).unwrap();
        assert_eq!(y.shape(), (1, 2, 2, 3).into());
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn matches_block_mean_oracle() {
        let x: Tensor4<f64> = Rng::new(2).uniform_tensor((1, 2, 4, 4), -1.0, 1.0);
        let y = avg_pool_grid(&x, 2).unwrap();
        for c in 0..2 {
            for gi in 0..2 {
                for gj in 0..2 {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += x.at(0, c, 2 * gi + di, 2 * gj + dj);
                        }
                    }
                    assert!((y.at(0, c, gi, gj) - s / 4.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn partial_edge_blocks_are_count_normalized() {
        let x = Tensor4::<f64>::from_fn((1, 1, 3, 3), |_, _, i, j| (i * 3 + j) as f64);
        let y = avg_pool_grid(&x, 2).unwrap();
        assert_eq!(y.at(0, 0, 0, 0), (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
        assert_eq!(y.at(0, 0, 0, 1), (2.0 + 5.0) / 2.0);
        assert_eq!(y.at(0, 0, 1, 1), 8.0);
    }

    #[test]
    fn zero_block_is_contract_error() {
        let x = Tensor4::<f64>::zeros((1, 1, 2, 2));
        assert!(matches!(avg_pool_grid(&x, 0), Err(Error::Contract(_))));
    }
}
