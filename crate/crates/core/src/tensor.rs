//! Dense row-major tensors.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Immutable dense array. Cloning shares the underlying buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor; every extent must be positive and match the data length.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: data.into(),
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![v].into(),
            requires_grad: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::zero(); n])
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![T::one(); n])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::matrix(n, n, data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..=bound)))
            .collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let mut t = Self::new(shape, self.to_vec())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect::<Vec<_>>().into(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data: Vec<T> = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: data.into(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// Plain matrix product `self * other` outside any tape.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (n, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {k2} differ"),
            ));
        }
        let mut out = vec![T::zero(); n * p];
        T::gemm(
            n,
            k,
            p,
            self.data(),
            (k as isize, 1),
            other.data(),
            (p as isize, 1),
            T::zero(),
            &mut out,
            (p as isize, 1),
        );
        Self::matrix(n, p, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::matrix(c, r, out)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape.last().copied().unwrap_or(1);
        &self.data[i * c..(i + 1) * c]
    }

    /// Rows at `idx`, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let (r, c) = self.dims2("select_rows")?;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape("select_rows", format!("row {i} of {r}")));
            }
            out.extend_from_slice(self.row(i));
        }
        Self::matrix(idx.len(), c, out)
    }

    /// Stack matrices with equal column counts.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no parts"))?;
        let (_, c) = first.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.dims2("concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", format!("{pc} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Self::matrix(rows, c, data)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    /// Little-endian bytes of the data, as hashed by the frozen-parameter checks.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * T::DTYPE.size());
        for &v in self.data.iter() {
            v.write_le(&mut out);
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.as_f64()))
                .collect::<Vec<_>>()
                .into(),
            requires_grad: self.requires_grad,
        }
    }
}

/// `max|a-b| / max(max|b|, floor)`: norm-wise relative error.
pub fn relative_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let diff = a.max_abs_diff(b)?.as_f64();
    let scale = b.max_abs().as_f64().max(f64::MIN_POSITIVE);
    Ok(diff / scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::<f64>::identity(2).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn transpose_and_select() {
        let m = Tensor::from_rows(&[vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = m.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let s = m.select_rows(&[1, 0]).unwrap();
        assert_eq!(s.data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);
        assert!(m.select_rows(&[2]).is_err());
    }
}
