// SPDX-License-Identifier: Apache-2.0

//! Dense row-major tensors and the handful of kernels the simulator and the
//! trainer need: matrix products, im2col lowering of convolutions, and
//! max-pooling.

mod conv;
mod scalar;

pub use conv::{col2im, conv2d, im2col, maxpool2d, ConvGeometry, PoolGeometry};
pub use scalar::{gemm, Op, Real};

use crate::error::{Error, Result};

/// Dense n-dimensional array stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); len],
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(vec![n, n], |i| {
            if i / n == i % n {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// 1-D tensor owning `data`.
    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row-major linear offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index rank {} for tensor of rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return Err(Error::shape(format!(
                    "index {index:?} out of bounds for {:?}",
                    self.shape
                )));
            }
            off = off * extent + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Extent of a 2-D tensor as `(rows, cols)`.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Copy of the `count` leading slices along axis 0 starting at `start`.
    pub fn slice_outer(&self, start: usize, count: usize) -> Result<Self> {
        let outer = *self
            .shape
            .first()
            .ok_or_else(|| Error::shape("scalar has no axis 0"))?;
        if start + count > outer {
            return Err(Error::shape(format!(
                "rows {start}..{} out of {outer}",
                start + count
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + count) * inner].to_vec(),
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        Op::N,
        Op::N,
        m,
        k,
        n,
        T::one(),
        a.data(),
        b.data(),
        T::zero(),
        &mut out,
    );
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · x` for a matrix `a[rows×cols]` and vector `x[rows]`.
pub fn matvec_t<T: Real>(a: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    let (rows, cols) = a.dims2()?;
    if x.len() != rows {
        return Err(Error::shape(format!(
            "vector of length {} against matrix with {rows} rows",
            x.len()
        )));
    }
    let mut out = vec![T::zero(); cols];
    gemm(
        Op::N,
        Op::N,
        1,
        rows,
        cols,
        T::one(),
        x,
        a.data(),
        T::zero(),
        &mut out,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_vector() {
        let v = Tensor::matrix(3, 1, vec![1.5, -2.0, 7.0]).unwrap();
        let out = matmul(&Tensor::identity(3), &v).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn hand_summed_product() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn zeros_annihilate() {
        let a = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let z = Tensor::zeros(vec![3, 4]);
        assert_eq!(matmul(&a, &z).unwrap(), Tensor::zeros(vec![2, 4]));
    }

    #[test]
    fn inner_dimension_mismatch_is_shape_error() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn row_major_offsets() {
        let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        assert_eq!(t.offset(&[1, 2, 3]).unwrap(), 23);
        assert_eq!(t.get(&[0, 1, 2]).unwrap(), 6.0);
        assert!(t.offset(&[2, 0, 0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0f64]).is_err());
    }

    #[test]
    fn matvec_transposed() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matvec_t(&a, &[1.0, -1.0]).unwrap(), vec![-3.0, -3.0, -3.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn identity_is_exact_on_both_sides(r in 1usize..7, c in 1usize..7, seed in any::<u64>()) {
                let a = Tensor::from_fn(vec![r, c], |i| ((i as u64 ^ seed) % 97) as f64 / 7.0 - 5.0);
                prop_assert_eq!(&matmul(&Tensor::identity(r), &a).unwrap(), &a);
                prop_assert_eq!(&matmul(&a, &Tensor::identity(c)).unwrap(), &a);
            }
        }
    }
}
