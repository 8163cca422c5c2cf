use crate::tensor::{Matrix, Scalar};

/// Numerically stable in-place softmax.
#[inline]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Scalar>(a: &Matrix<T>) -> Matrix<T> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn uniform_row() {
        let m = Matrix::from_rows(&[vec![1.0f64, 1.0, 1.0]]).unwrap();
        let s = softmax_rows(&m);
        for &v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let m = Matrix::from_rows(&[vec![1000.0f64, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(s.get(0, 1) >= 0.0 && s.get(0, 1) < 1e-12);
        let m32 = Matrix::from_rows(&[vec![1000.0f32, 0.0]]).unwrap();
        assert!(softmax_rows(&m32).data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = Rng::new(17);
        let m = Matrix::from_fn(5, 7, |_, _| rng.uniform(-5.0, 5.0));
        let s = softmax_rows(&m);
        for i in 0..5 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.row(i).iter().all(|&v| v > 0.0));
        }
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut rng = Rng::new(seed);
            let m = Matrix::from_fn(4, 6, |_, _| rng.uniform(-3.0, 3.0));
            let shifted = Matrix::from_fn(4, 6, |i, j| m.get(i, j) + shift * (i as f64 + 1.0));
            let d = softmax_rows(&m).max_abs_diff(&softmax_rows(&shifted)).unwrap();
            prop_assert!(d < 1e-12);
        }
    }
}
