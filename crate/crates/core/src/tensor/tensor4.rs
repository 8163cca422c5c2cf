use super::{Scalar, Shape4};
use crate::error::{Error, Result};

/// Dense batch-channel-height-width tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: impl Into<Shape4>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if data.len() != shape.numel() {
            return Err(Error::dim("Tensor4::new", shape, data.len()));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Shape4>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Shape4>, value: T) -> Self {
        let shape = shape.into();
        Tensor4 {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a tensor from `f(b, c, i, j)`.
    pub fn from_fn(
        shape: impl Into<Shape4>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.n {
            for c in 0..shape.c {
                for i in 0..shape.h {
                    for j in 0..shape.w {
                        data.push(f(b, c, i, j));
                    }
                }
            }
        }
        Tensor4 { shape, data }
    }

    pub fn scalar(v: T) -> Self {
        Tensor4 {
            shape: Shape4::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    #[inline]
    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, i: usize, j: usize) -> T {
        self.data[self.shape.offset(b, c, i, j)]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, i: usize, j: usize) -> &mut T {
        let o = self.shape.offset(b, c, i, j);
        &mut self.data[o]
    }

    /// Contiguous `h * w` plane for one (batch, channel) pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let hw = self.shape.hw();
        let start = (b * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    /// Contiguous `c * h * w` block for one batch element.
    #[inline]
    pub fn batch(&self, b: usize) -> &[T] {
        let len = self.shape.c * self.shape.hw();
        &self.data[b * len..(b + 1) * len]
    }

    #[inline]
    pub fn batch_mut(&mut self, b: usize) -> &mut [T] {
        let len = self.shape.c * self.shape.hw();
        &mut self.data[b * len..(b + 1) * len]
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: impl Into<Shape4>) -> Result<Self> {
        let shape = shape.into();
        if shape.numel() != self.shape.numel() {
            return Err(Error::dim("Tensor4::reshape", self.shape, shape));
        }
        Ok(Tensor4 {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim("Tensor4::zip_map", self.shape, other.shape));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("Tensor4::add_assign", self.shape, other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::dim("Tensor4::max_abs_diff", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// True when every element has the identical bit pattern.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
