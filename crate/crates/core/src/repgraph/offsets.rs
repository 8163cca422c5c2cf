use crate::error::{Error, Result};
use crate::ops::{project_1x1, Projection1x1};
use crate::tensor::{Scalar, Tensor4};

/// Per-position sample displacements, shape `(n, 2S, h, w)`.
///
/// Channel `2k` holds `Δy` of sample `k` and channel `2k + 1` its `Δx`, in
/// feature-map pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T> {
    field: Tensor4<T>,
}

impl<T: Scalar> OffsetField<T> {
    pub fn new(field: Tensor4<T>) -> Result<Self> {
        let c = field.shape().c;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "offset field needs 2S channels, got {c}"
            )));
        }
        if !field.all_finite() {
            return Err(Error::contract("offset field has non-finite entries"));
        }
        Ok(OffsetField { field })
    }

    pub fn zeros(n: usize, s: usize, h: usize, w: usize) -> Self {
        OffsetField {
            field: Tensor4::zeros((n, 2 * s, h, w)),
        }
    }

    /// `S = h·w` samples per query that visit every grid position in
    /// row-major order, so sample `k` of every query lands on node `k`.
    pub fn full_grid(n: usize, h: usize, w: usize) -> Self {
        let s = h * w;
        let field = Tensor4::from_fn((n, 2 * s, h, w), |_, ch, i, j| {
            let k = ch / 2;
            let (ky, kx) = (k / w, k % w);
            if ch % 2 == 0 {
                T::of(ky as f64 - i as f64)
            } else {
                T::of(kx as f64 - j as f64)
            }
        });
        OffsetField { field }
    }

    pub fn s(&self) -> usize {
        self.field.shape().c / 2
    }

    pub fn tensor(&self) -> &Tensor4<T> {
        &self.field
    }

    pub fn into_tensor(self) -> Tensor4<T> {
        self.field
    }

    /// `(Δy, Δx)` of sample `k` at `(b, i, j)`.
    pub fn get(&self, b: usize, k: usize, i: usize, j: usize) -> (T, T) {
        (
            self.field.at(b, 2 * k, i, j),
            self.field.at(b, 2 * k + 1, i, j),
        )
    }

    /// Smallest distance from any entry to the nearest integer.
    pub fn min_integer_distance(&self) -> f64 {
        integer_distance(&self.field)
    }
}

pub(crate) fn integer_distance<T: Scalar>(t: &Tensor4<T>) -> f64 {
    t.data()
        .iter()
        .map(|v| {
            let f = v.as_f64();
            (f - f.round()).abs()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Offsets regressed by a 1×1 projection with `2S` outputs.
pub fn regress_offsets<T: Scalar>(
    x: &Tensor4<T>,
    w_off: &Projection1x1<T>,
) -> Result<OffsetField<T>> {
    if !w_off.c_out().is_multiple_of(2) {
        return Err(Error::dim("regress_offsets", w_off.c_out(), "2S"));
    }
    OffsetField::new(project_1x1(x, w_off)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn zero_weights_give_zero_offsets() {
        let x: Tensor4<f64> = Rng::new(1).uniform_tensor((2, 5, 3, 4), -1.0, 1.0);
        let off = regress_offsets(&x, &Projection1x1::zeros(5, 18, true)).unwrap();
        assert_eq!(off.s(), 9);
        assert!(off.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_only_shifts_first_sample_down() {
        let mut p = Projection1x1::<f64>::zeros(3, 4, true);
        p.bias = Some(Tensor4::new((1, 4, 1, 1), vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let x: Tensor4<f64> = Rng::new(2).uniform_tensor((1, 3, 2, 2), -1.0, 1.0);
        let off = regress_offsets(&x, &p).unwrap();
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert_eq!(off.get(0, 0, i, j), (1.0, 0.0));
            assert_eq!(off.get(0, 1, i, j), (0.0, 0.0));
        }
    }

    #[test]
    fn random_case_is_a_projection() {
        let mut rng = Rng::new(3);
        let p = Projection1x1::<f64>::init(&mut rng, 4, 6, true);
        let x: Tensor4<f64> = rng.uniform_tensor((2, 4, 3, 3), -1.0, 1.0);
        let off = regress_offsets(&x, &p).unwrap();
        assert!(off.tensor().bit_eq(&project_1x1(&x, &p).unwrap()));
        assert!(regress_offsets(&x, &Projection1x1::zeros(4, 5, false)).is_err());
    }

    #[test]
    fn full_grid_targets() {
        let f = OffsetField::<f64>::full_grid(1, 2, 3);
        assert_eq!(f.s(), 6);
        // Query (1, 2), sample 4 is node (1, 1).
        assert_eq!(f.get(0, 4, 1, 2), (0.0, -1.0));
        assert_eq!(f.get(0, 0, 1, 2), (-1.0, -2.0));
    }
}
