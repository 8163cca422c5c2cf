use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Tensor4};

/// One integral neighbour of a fractional position.
///
/// `weight` is the bilinear kernel value `G(t, p)`; `d_y` and `d_x` are its
/// partial derivatives with respect to the position coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    /// Flat offset `i * w + j` inside an `h × w` plane.
    pub idx: usize,
    pub weight: T,
    pub d_y: T,
    pub d_x: T,
}

/// In-bounds neighbours of `(py, px)` on an `h × w` grid.
///
/// The kernel is `max(0, 1-|ty-py|) · max(0, 1-|tx-px|)`, truncated at the
/// border: neighbours outside the map are dropped, which is the same as
/// sampling zeros there. Derivatives follow the floor-based split, so at an
/// exact integer coordinate the derivative is the one-sided (right) one.
/// Non-finite positions have no taps.
#[inline]
pub(crate) fn taps<T: Scalar>(py: T, px: T, h: usize, w: usize) -> ([Tap<T>; 4], usize) {
    let zero = Tap {
        idx: 0,
        weight: T::zero(),
        d_y: T::zero(),
        d_x: T::zero(),
    };
    let mut out = [zero; 4];
    if !py.is_finite() || !px.is_finite() {
        return (out, 0);
    }
    let (pyd, pxd) = (py.as_f64(), px.as_f64());
    let lim = (h.max(w) + 2) as f64;
    if pyd < -2.0 || pxd < -2.0 || pyd > lim || pxd > lim {
        return (out, 0);
    }
    let floor = |v: f64| {
        let t = v as isize;
        if (t as f64) > v {
            t - 1
        } else {
            t
        }
    };
    let (y0, x0) = (floor(pyd), floor(pxd));
    let ly = py - T::of(y0 as f64);
    let lx = px - T::of(x0 as f64);
    let one = T::one();
    let (hy, hx) = (one - ly, one - lx);
    let (hi, wi) = (h as isize, w as isize);

    let corners = [
        (y0, x0, hy * hx, -hx, -hy),
        (y0, x0 + 1, hy * lx, -lx, hy),
        (y0 + 1, x0, ly * hx, hx, -ly),
        (y0 + 1, x0 + 1, ly * lx, lx, ly),
    ];
    let mut n = 0;
    for (ty, tx, weight, d_y, d_x) in corners {
        if ty >= 0 && ty < hi && tx >= 0 && tx < wi {
            out[n] = Tap {
                idx: ty as usize * w + tx as usize,
                weight,
                d_y,
                d_x,
            };
            n += 1;
        }
    }
    (out, n)
}

/// Bilinearly interpolated channel vectors at fractional `(batch, y, x)`
/// positions; returns a `positions.len() × c` matrix.
pub fn bilinear_sample<T: Scalar>(
    x: &Tensor4<T>,
    positions: &[(usize, T, T)],
) -> Result<Matrix<T>> {
    let s = x.shape();
    let mut out = Matrix::zeros(positions.len(), s.c);
    for (r, &(b, py, px)) in positions.iter().enumerate() {
        if b >= s.n {
            return Err(Error::Index {
                op: "bilinear_sample",
                index: b,
                bound: s.n,
            });
        }
        let (tp, n) = taps(py, px, s.h, s.w);
        let row = out.row_mut(r);
        for t in &tp[..n] {
            for (c, v) in row.iter_mut().enumerate() {
                *v += t.weight * x.plane(b, c)[t.idx];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn grid() -> Tensor4<f64> {
        Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn centroid() {
        let v = bilinear_sample(&grid(), &[(0, 0.5, 0.5)]).unwrap();
        assert_eq!(v.get(0, 0), 2.5);
    }

    #[test]
    fn exact_grid_point() {
        let v = bilinear_sample(&grid(), &[(0, 1.0, 0.0)]).unwrap();
        assert_eq!(v.get(0, 0), 3.0);
    }

    #[test]
    fn far_outside_is_zero() {
        let v = bilinear_sample(&grid(), &[(0, -2.0, -2.0)]).unwrap();
        assert_eq!(v.get(0, 0), 0.0);
    }

    #[test]
    fn half_outside_truncates_kernel() {
        // Only the (0,0) neighbour is inside, with weight 0.5 * 1.
        let v = bilinear_sample(&grid(), &[(0, -0.5, 0.0)]).unwrap();
        assert_eq!(v.get(0, 0), 0.5);
    }

    #[test]
    fn bad_batch_index() {
        assert!(matches!(
            bilinear_sample(&grid(), &[(1, 0.0, 0.0)]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn exact_on_all_integer_positions() {
        let x: Tensor4<f64> = Rng::new(5).uniform_tensor((2, 3, 4, 5), -100.0, 100.0);
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..5 {
                    let v = bilinear_sample(&x, &[(b, i as f64, j as f64)]).unwrap();
                    for c in 0..3 {
                        assert_eq!(v.get(0, c), x.at(b, c, i, j));
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn linear_in_features(seed in any::<u64>(), py in -1.5f64..4.5, px in -1.5f64..5.5, a in -3.0f64..3.0, bcoef in -3.0f64..3.0) {
            let mut rng = Rng::new(seed);
            let x: Tensor4<f64> = rng.uniform_tensor((1, 2, 4, 5), -1.0, 1.0);
            let z: Tensor4<f64> = rng.uniform_tensor((1, 2, 4, 5), -1.0, 1.0);
            let mix = x.zip_map(&z, |u, v| a * u + bcoef * v).unwrap();
            let pos = [(0, py, px)];
            let lhs = bilinear_sample(&mix, &pos).unwrap();
            let sx = bilinear_sample(&x, &pos).unwrap();
            let sz = bilinear_sample(&z, &pos).unwrap();
            for c in 0..2 {
                prop_assert!((lhs.get(0, c) - (a * sx.get(0, c) + bcoef * sz.get(0, c))).abs() < 1e-12);
            }
        }

        #[test]
        fn partition_of_unity(py in 0.0f64..3.0, px in 0.0f64..4.0, k in -5.0f64..5.0) {
            let x = Tensor4::<f64>::full((1, 1, 4, 5), k);
            let (tp, n) = taps(py, px, 4, 5);
            let total: f64 = tp[..n].iter().map(|t| t.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let v = bilinear_sample(&x, &[(0, py, px)]).unwrap();
            prop_assert!((v.get(0, 0) - k).abs() < 1e-12);
        }
    }
}
