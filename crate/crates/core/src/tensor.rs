//! Dense row-major tensors and the value-level primitives the tape builds on.
//!
//! Tensors are immutable once constructed; storage is shared through an
//! `Arc`, so clones are cheap and tensors can cross threads freely. Every
//! public operation checks its result for NaN/Inf and reports
//! [`Error::NonFinite`] instead of returning poisoned data.

use std::fmt;
use std::iter::Sum;
use std::sync::Arc;

use num_traits::{Float, FloatConst};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter::Buf;
use crate::rng::SeededRng;

/// Floating-point element type. `f64` is the default everywhere; `f32` is
/// available for benchmarking.
pub trait Scalar:
    Float + FloatConst + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const NAME: &'static str;
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Extents of a tensor, rank 1 to 3, every extent at least 1.
#[derive(Clone, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Self::new(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// `(rows, cols)` viewing rank-1 shapes as a single row. Rank-3 shapes
    /// fold their leading extents into rows.
    pub fn as_matrix(&self) -> (usize, usize) {
        match self.0.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            [b, r, c] => (b * r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Shape::new(v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[derive(Clone)]
pub struct Tensor<T: Scalar = f64> {
    shape: Shape,
    data: Arc<Buf<T>>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &&self.data[..self.data.len().min(16)])
            .finish()
    }
}

impl<T: Scalar> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

pub(crate) fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                len: data.len(),
                shape,
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self::from_parts(shape, data))
    }

    /// Construction for results whose finiteness is checked by the caller.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Self {
            shape,
            data: Arc::new(Buf::new(data, 1)),
        }
    }

    pub(crate) fn checked(op: &'static str, shape: Shape, data: Vec<T>) -> Result<Self> {
        check_finite(op, &data)?;
        Ok(Self::from_parts(shape, data))
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(Shape::matrix(r, c)?, rows.concat())
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::new(Shape::matrix(rows, cols)?, data)
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Self::new(Shape::new(vec![data.len()])?, data)
    }

    pub fn scalar(x: T) -> Result<Self> {
        Self::new(Shape(vec![1]), vec![x])
    }

    pub fn full(shape: Shape, value: T) -> Self {
        let n = shape.numel();
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn eye(n: usize) -> Result<Self> {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        Self::matrix(n, n, data)
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: Shape, std: f64, rng: &mut SeededRng) -> Self {
        let data = (0..shape.numel()).map(|_| T::of(rng.normal() * std)).collect();
        Self::from_parts(shape, data)
    }

    pub fn rand_uniform(shape: Shape, lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let data = (0..shape.numel())
            .map(|_| T::of(rng.uniform_in(lo, hi)))
            .collect();
        Self::from_parts(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape.as_matrix().0
    }

    pub fn cols(&self) -> usize {
        self.shape.as_matrix().1
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|x| x.as_f64()).collect(),
        )
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|x| U::of(x.as_f64())).collect(),
        )
    }

    /// Same storage under a new shape of equal element count.
    pub fn reshape(&self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.data.iter().map(|&x| f(x)).collect();
        Self::checked(op, self.shape.clone(), data)
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(op, other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::checked(op, self.shape.clone(), data)
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn require_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.rank() != 2 {
            return Err(Error::invalid(format!(
                "{op}: expected a matrix, got shape {}",
                self.shape
            )));
        }
        Ok(self.shape.as_matrix())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        self.map("scale", |a| a * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    /// Standard matrix product, `[M×K] · [K×P] → [M×P]`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.require_matrix("matmul")?;
        let (k2, p) = other.require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![T::zero(); m * p];
        for i in 0..m {
            let orow = &mut out[i * p..(i + 1) * p];
            for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
                if aik == T::zero() {
                    continue;
                }
                let brow = &b[kk * p..(kk + 1) * p];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aik * bv;
                }
            }
        }
        Self::checked("matmul", Shape::matrix(m, p)?, out)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("transpose")?;
        let a = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        Ok(Self::from_parts(Shape::matrix(c, r)?, out))
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Self> {
        check_finite("softmax_rows", self.data())?;
        let (r, c) = self.shape.as_matrix();
        let mut out = self.to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        Self::checked("softmax_rows", self.shape.clone(), out)
    }

    /// Row-wise softmax restricted to columns `j <= i`; masked entries are 0.
    /// The maximum is taken over allowed entries only, so row `i` depends
    /// on nothing outside its allowed prefix.
    pub fn softmax_rows_causal(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("softmax_rows_causal")?;
        check_finite("softmax_rows_causal", self.data())?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let allowed = (i + 1).min(c);
            let row = &mut out[i * c..i * c + allowed];
            row.copy_from_slice(&self.row(i)[..allowed]);
            softmax_in_place(row);
        }
        Self::checked("softmax_rows_causal", self.shape.clone(), out)
    }

    /// Column-wise arithmetic mean, `[N×D] → [1×D]`.
    pub fn mean_rows(&self) -> Result<Self> {
        let (r, c) = self.require_matrix("mean_rows")?;
        let mut out = vec![T::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(self.row(i)) {
                *o = *o + x;
            }
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        Self::checked("mean_rows", Shape::matrix(1, c)?, out)
    }

    /// Output row `i` is input row `(i - s) mod N`; `s = 1` moves row 0 to row 1.
    pub fn roll_rows(&self, s: isize) -> Result<Self> {
        let (n, c) = self.require_matrix("roll_rows")?;
        let shift = s.rem_euclid(n as isize) as usize;
        let mut out = Vec::with_capacity(n * c);
        for i in 0..n {
            let src = (i + n - shift) % n;
            out.extend_from_slice(self.row(src));
        }
        Ok(Self::from_parts(self.shape.clone(), out))
    }

    /// Columns `start..end` as a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.require_matrix("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::invalid(format!(
                "slice_cols: range {start}..{end} out of bounds for {c} columns"
            )));
        }
        if start == 0 && end == c {
            return Ok(self.clone());
        }
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&self.row(i)[start..end]);
        }
        Ok(Self::from_parts(Shape::matrix(r, end - start)?, out))
    }

    pub fn concat_cols(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        if parts.len() == 1 {
            return Ok(first.clone());
        }
        let r = first.rows();
        let mut total = 0;
        for p in parts {
            let (pr, pc) = p.require_matrix("concat_cols")?;
            if pr != r {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_parts(Shape::matrix(r, total)?, out))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x = *x * inv);
}

/// Largest elementwise relative error `|a-b| / max(|a|, |b|, floor)`.
pub fn max_rel_err<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    rel_err_slices(a.data(), b.data(), floor)
}

pub fn rel_err_slices<T: Scalar>(a: &[T], b: &[T], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn shape_rejects_zero_and_rank() {
        assert!(Shape::new(vec![0, 3]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        assert!(Shape::new(vec![1, 2, 3, 4]).is_err());
        assert_eq!(Shape::new(vec![2, 3, 4]).unwrap().numel(), 24);
    }

    #[test]
    fn new_rejects_nonfinite_and_bad_length() {
        let s = Shape::matrix(1, 2).unwrap();
        assert!(matches!(
            Tensor::new(s.clone(), vec![1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            Tensor::new(s, vec![1.0]),
            Err(Error::DataLength { .. })
        ));
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let b = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(Tensor::eye(3).unwrap().matmul(&b).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let v = m(&[&[1.0], &[1.0]]);
        assert_eq!(a.matmul(&v).unwrap(), m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = m(&[&[1.0, 2.0]]);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn matmul_overflow_is_reported() {
        let a = m(&[&[1e200, 1e200]]);
        let b = m(&[&[1e200], &[1e200]]);
        assert!(matches!(a.matmul(&b), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = m(&[&[0.0, 0.0, 0.0], &[1000.0, 1000.0, 1000.0]])
            .softmax_rows()
            .unwrap();
        for &x in s.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = m(&[&[0.0, 2f64.ln()]]).softmax_rows().unwrap();
        assert!((s.at(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.at(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let s = m(&[&[1.0, 5.0, 2.0], &[0.0, 0.0, 9.0], &[1.0, 1.0, 1.0]])
            .softmax_rows_causal()
            .unwrap();
        assert_eq!(s.row(0), &[1.0, 0.0, 0.0]);
        assert!((s.at(1, 0) - 0.5).abs() < 1e-15 && s.at(1, 2) == 0.0);
        assert!((s.at(2, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mean_rows_examples() {
        let single = m(&[&[1.5, -2.0]]);
        assert_eq!(single.mean_rows().unwrap(), single);
        assert_eq!(
            m(&[&[1.0, 3.0], &[3.0, 5.0]]).mean_rows().unwrap(),
            m(&[&[2.0, 4.0]])
        );
    }

    #[test]
    fn roll_rows_examples() {
        let a = m(&[&[1.0], &[2.0], &[3.0]]);
        assert_eq!(a.roll_rows(0).unwrap(), a);
        assert_eq!(a.roll_rows(3).unwrap(), a);
        assert_eq!(a.roll_rows(1).unwrap(), m(&[&[3.0], &[1.0], &[2.0]]));
        assert_eq!(a.roll_rows(-1).unwrap(), m(&[&[2.0], &[3.0], &[1.0]]));
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let l = a.slice_cols(0, 1).unwrap();
        let r = a.slice_cols(1, 3).unwrap();
        assert_eq!(Tensor::concat_cols(&[l, r]).unwrap(), a);
        assert!(a.slice_cols(2, 2).is_err());
    }

    #[test]
    fn reshape_shares_storage() {
        let a = m(&[&[1.0, 2.0, 3.0]]);
        let b = a.reshape(Shape::matrix(3, 1).unwrap()).unwrap();
        assert_eq!(b.data(), a.data());
        assert!(a.reshape(Shape::matrix(2, 1).unwrap()).is_err());
    }
}
