//! Dense rank-4 tensors, matrices, seeded randomness and tensor files.

mod io;
mod matrix;
mod rng;
mod scalar;
mod shape;
mod tensor4;

pub use io::{
    decode_any, encode_tensor, load_any, load_tensor, load_tensors, save_tensor, save_tensors,
    AnyTensor, MAGIC,
};
pub(crate) use matrix::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
pub use matrix::{matmul, Matrix};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use shape::Shape4;
pub use tensor4::Tensor4;

/// Flattens `x` into an `(n·h·w) × c` node matrix: row `b·h·w + s` holds
/// the channel vector of spatial site `s` in batch element `b`.
pub fn reshape_nodes<T: Scalar>(x: &Tensor4<T>) -> Matrix<T> {
    let s = x.shape();
    let hw = s.hw();
    let mut m = Matrix::zeros(s.n * hw, s.c);
    for b in 0..s.n {
        for c in 0..s.c {
            let plane = x.plane(b, c);
            for (site, &v) in plane.iter().enumerate() {
                m.set(b * hw + site, c, v);
            }
        }
    }
    m
}

/// Inverse of [`reshape_nodes`].
pub fn nodes_to_tensor<T: Scalar>(
    m: &Matrix<T>,
    n: usize,
    h: usize,
    w: usize,
) -> crate::Result<Tensor4<T>> {
    if m.rows() != n * h * w {
        return Err(crate::Error::dim("nodes_to_tensor", m.shape(), (n, h, w)));
    }
    let hw = h * w;
    Ok(Tensor4::from_fn((n, m.cols(), h, w), |b, c, i, j| {
        m.get(b * hw + i * w + j, c)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    #[test]
    fn small_shapes() {
        let x = Tensor4::<f64>::from_fn((1, 3, 2, 2), |_, c, i, j| (c * 100 + i * 10 + j) as f64);
        let m = reshape_nodes(&x);
        assert_eq!(m.shape(), (4, 3));
        assert_eq!(m.row(3), &[11.0, 111.0, 211.0]);
        assert!(nodes_to_tensor(&m, 1, 2, 2).unwrap().bit_eq(&x));

        let y = Tensor4::<f64>::new((2, 1, 1, 1), vec![1.0, 2.0]).unwrap();
        assert_eq!(reshape_nodes(&y).shape(), (2, 1));
    }

    #[test]
    fn element_mapping_matches_index_arithmetic() {
        let x: Tensor4<f64> = Rng::new(8).uniform_tensor((2, 4, 3, 5), -1.0, 1.0);
        let m = reshape_nodes(&x);
        let (h, w) = (3, 5);
        for row in 0..m.rows() {
            let b = row / (h * w);
            let site = row % (h * w);
            for c in 0..4 {
                assert_eq!(m.get(row, c), x.data()[((b * 4 + c) * h * w) + site]);
            }
        }
    }

    proptest! {
        #[test]
        fn reshape_round_trip(n in 1usize..=8, c in 1usize..=8, h in 1usize..=8, w in 1usize..=8, seed in any::<u64>()) {
            let x: Tensor4<f64> = Rng::new(seed).uniform_tensor((n, c, h, w), -10.0, 10.0);
            let back = nodes_to_tensor(&reshape_nodes(&x), n, h, w).unwrap();
            prop_assert!(back.bit_eq(&x));
        }

        #[test]
        fn matmul_is_associative(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let mut gen = || Matrix::from_fn(8, 8, |_, _| rng.uniform(-1.0, 1.0));
            let (a, b, c) = (gen(), gen(), gen());
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale < 1e-10);
        }

        #[test]
        fn tensor_file_round_trip(n in 1usize..4, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
            let x: Tensor4<f64> = Rng::new(seed).uniform_tensor((n, c, h, w), -1e6, 1e6);
            let mut buf = Vec::new();
            encode_tensor(&x, &mut buf);
            let (back, used) = decode_any(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert!(matches!(back, AnyTensor::F64(t) if t.bit_eq(&x)));
        }
    }
}
