//! Dense row-major tensor kernel.
//!
//! Shapes are checked at every call and there is no implicit broadcasting.
//! Operations that produce non-finite values report an error instead of
//! letting NaN/Inf propagate silently.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major, generic over the scalar type.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorBase<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Self { shape: shape.to_vec(), data };
        t.check_finite("new tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dim(format!("expected 2-D tensor, got {:?}", s))),
        }
    }

    fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [n, r, c] => Ok((*n, *r, *c)),
            s => Err(Error::Dim(format!("expected 3-D tensor, got {:?}", s))),
        }
    }

    /// Owned copy of slice `n` of a 3-D tensor, shaped `[r, c]`.
    pub fn batch_slice(&self, n: usize) -> Result<Self> {
        let (b, r, c) = self.dims3()?;
        if n >= b {
            return Err(Error::Dim(format!("batch index {} out of {}", n, b)));
        }
        let stride = r * c;
        Ok(Self {
            shape: vec![r, c],
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        })
    }

    /// Write a `[r, c]` tensor into slice `n` of a 3-D tensor.
    pub fn set_batch_slice(&mut self, n: usize, slice: &Self) -> Result<()> {
        let (b, r, c) = self.dims3()?;
        if n >= b || slice.shape() != [r, c] {
            return Err(Error::Dim(format!(
                "slice {:?} does not fit batch {} of {:?}",
                slice.shape(),
                n,
                self.shape
            )));
        }
        let stride = r * c;
        self.data[n * stride..(n + 1) * stride].copy_from_slice(&slice.data);
        Ok(())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self { shape: vec![c, r], data: out })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64_lossy(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    fn zip_with(&self, other: &Self, what: &str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "{}: shapes {:?} vs {:?}",
                what, self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dim(format!(
                "axpy: shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

/// `[m, p] x [p, q] -> [m, q]` row-major matrix product.
pub fn matmul<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (m, p) = a.dims2()?;
    let (p2, q) = b.dims2()?;
    if p != p2 {
        return Err(Error::Dim(format!(
            "matmul: inner dims {} vs {}",
            p, p2
        )));
    }
    let mut out = TensorBase::zeros(&[m, q]);
    matmul_into(&a.data, &b.data, &mut out.data, m, p, q);
    out.check_finite("matmul result")?;
    Ok(out)
}

/// Raw kernel: `c[m x q] = a[m x p] * b[p x q]`, ikj loop order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, p: usize, q: usize) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(c.len(), m * q);
    for v in c.iter_mut() {
        *v = T::zero();
    }
    for i in 0..m {
        let crow = &mut c[i * q..(i + 1) * q];
        for k in 0..p {
            let aik = a[i * p + k];
            let brow = &b[k * q..(k + 1) * q];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// Batched product: slice `n` of the result is `matmul(a[n], b[n])`.
pub fn batched_matmul<T: Scalar>(a: &TensorBase<T>, b: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (na, m, p) = a.dims3()?;
    let (nb, p2, q) = b.dims3()?;
    if na != nb {
        return Err(Error::Dim(format!("batched_matmul: batch {} vs {}", na, nb)));
    }
    if p != p2 {
        return Err(Error::Dim(format!("batched_matmul: inner dims {} vs {}", p, p2)));
    }
    let mut out = TensorBase::zeros(&[na, m, q]);
    for n in 0..na {
        let astride = m * p;
        let bstride = p * q;
        let cstride = m * q;
        matmul_into(
            &a.data[n * astride..(n + 1) * astride],
            &b.data[n * bstride..(n + 1) * bstride],
            &mut out.data[n * cstride..(n + 1) * cstride],
            m,
            p,
            q,
        );
    }
    out.check_finite("batched_matmul result")?;
    Ok(out)
}

/// Euclidean norm of each column of a `[d, k]` matrix, returned as `[1, k]`.
pub fn column_norms<T: Scalar>(v: &TensorBase<T>) -> Result<TensorBase<T>> {
    let (d, k) = v.dims2()?;
    let mut out = vec![T::zero(); k];
    for i in 0..d {
        let row = &v.data[i * k..(i + 1) * k];
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x * x;
        }
    }
    for o in out.iter_mut() {
        *o = o.sqrt();
    }
    TensorBase::new(&[1, k], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use proptest::prelude::*;

    type T64 = TensorBase<f64>;

    fn randn_t(stream: &mut RngStream, shape: &[usize]) -> T64 {
        crate::rng::randn(stream, shape)
    }

    #[test]
    fn matmul_identity() {
        let i2 = T64::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = T64::new(&[2, 2], vec![3.0, -1.0, 2.5, 4.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap(), m);
    }

    #[test]
    fn matmul_rank1_outer() {
        let b = T64::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let a = T64::new(&[1, 2], vec![0.1, 0.2]).unwrap();
        let out = matmul(&b, &a).unwrap();
        assert_eq!(out.data(), &[0.1, 0.2, 0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut s = RngStream::new(7, 0);
        let a = randn_t(&mut s, &[5, 4]);
        let b = randn_t(&mut s, &[4, 3]);
        let out = matmul(&a, &b).unwrap();
        // independent triple-loop oracle
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.data()[i * 4 + k] * b.data()[k * 3 + j];
                }
                assert!((out.data()[i * 3 + j] - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = T64::zeros(&[2, 3]);
        let b = T64::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dim(_))));
    }

    #[test]
    fn batched_matmul_degenerate_batch() {
        let mut s = RngStream::new(1, 1);
        let a = randn_t(&mut s, &[3, 4]);
        let b = randn_t(&mut s, &[4, 2]);
        let ab = matmul(&a, &b).unwrap();
        let a3 = a.clone().reshape(&[1, 3, 4]).unwrap();
        let b3 = b.clone().reshape(&[1, 4, 2]).unwrap();
        let out = batched_matmul(&a3, &b3).unwrap();
        assert_eq!(out.batch_slice(0).unwrap(), ab);
    }

    #[test]
    fn batched_matmul_scaled_identity() {
        let m = T64::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut a = T64::zeros(&[2, 2, 2]);
        a.set_batch_slice(0, &T64::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        a.set_batch_slice(1, &T64::new(&[2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let mut b = T64::zeros(&[2, 2, 2]);
        b.set_batch_slice(0, &m).unwrap();
        b.set_batch_slice(1, &m).unwrap();
        let out = batched_matmul(&a, &b).unwrap();
        assert_eq!(out.batch_slice(0).unwrap(), m);
        assert_eq!(out.batch_slice(1).unwrap(), m.scale(2.0));
    }

    #[test]
    fn column_norms_examples() {
        let i3 = T64::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(column_norms(&i3).unwrap().data(), &[1.0, 1.0, 1.0]);
        let v = T64::new(&[2, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(column_norms(&v).unwrap().data(), &[5.0]);
    }

    #[test]
    fn column_norms_matches_loop() {
        let mut s = RngStream::new(11, 0);
        let v = randn_t(&mut s, &[6, 4]);
        let norms = column_norms(&v).unwrap();
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..6 {
                let x = v.data()[i * 4 + j];
                acc += x * x;
            }
            assert!((norms.data()[j] - acc.sqrt()).abs() <= 1e-12);
        }
    }

    #[test]
    fn nonfinite_rejected() {
        assert!(matches!(
            T64::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn batched_equals_per_slice(nb in 1usize..4, m in 1usize..5, p in 1usize..5, q in 1usize..5, seed in 0u64..1000) {
            let mut s = RngStream::new(seed, 3);
            let a = randn_t(&mut s, &[nb, m, p]);
            let b = randn_t(&mut s, &[nb, p, q]);
            let out = batched_matmul(&a, &b).unwrap();
            for n in 0..nb {
                let single = matmul(&a.batch_slice(n).unwrap(), &b.batch_slice(n).unwrap()).unwrap();
                prop_assert_eq!(out.batch_slice(n).unwrap(), single);
            }
        }

        #[test]
        fn matmul_associative_within_tolerance(seed in 0u64..200) {
            let mut s = RngStream::new(seed, 4);
            let a = randn_t(&mut s, &[3, 3]);
            let b = randn_t(&mut s, &[3, 3]);
            let c = randn_t(&mut s, &[3, 3]);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let denom = left.max_abs().max(1.0);
            prop_assert!(left.sub(&right).unwrap().max_abs() / denom < 1e-10);
        }
    }
}
