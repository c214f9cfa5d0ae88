//! Dense numeric primitives shared by the rest of the crate.
//!
//! Everything is `f64`. Parameters are stored as a list of [`Matrix`]
//! segments; [`flatten`] and [`unflatten`] convert between that layout and a
//! single [`FlatVector`] using the segment order reported by [`Segmented`].

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense vector of parameters, gradients or representations.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatVector(Vec<f64>);

impl FlatVector {
    pub fn new(values: Vec<f64>) -> Self {
        FlatVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        FlatVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &FlatVector) -> Result<f64> {
        check_len(self.len(), other.len())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &FlatVector) -> Result<FlatVector> {
        check_len(self.len(), other.len())?;
        Ok(FlatVector(
            self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect(),
        ))
    }

    pub fn scale(&self, factor: f64) -> FlatVector {
        FlatVector(self.0.iter().map(|v| v * factor).collect())
    }
}

impl From<Vec<f64>> for FlatVector {
    fn from(values: Vec<f64>) -> Self {
        FlatVector(values)
    }
}

impl Index<usize> for FlatVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for FlatVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Row-major dense matrix. Bias vectors are stored as `n x 1` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        check_len(rows * cols, values.len())?;
        Ok(Matrix { rows, cols, values })
    }

    pub fn column(values: Vec<f64>) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = self * x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            *out = dot(self.row(r), x);
        }
    }

    /// `y += self^T * x`.
    pub fn matvec_t_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (out, w) in y.iter_mut().zip(self.row(r)) {
                *out += xr * w;
            }
        }
    }

    /// `self += scale * u v^T`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            let a = scale * ur;
            if a == 0.0 {
                continue;
            }
            for (dst, vc) in self.row_mut(r).iter_mut().zip(v) {
                *dst += a * vc;
            }
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.values[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if !self.same_shape(other) {
            return Err(Error::dim(self.len(), other.len()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .collect(),
        })
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::dim(self.len(), other.len()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }
}

/// A value made of an ordered list of matrix segments.
///
/// The order returned by `segments` is the canonical flatten order; it must be
/// identical between `segments` and `segments_mut`.
pub trait Segmented {
    fn segments(&self) -> Vec<&Matrix>;
    fn segments_mut(&mut self) -> Vec<&mut Matrix>;

    fn param_count(&self) -> usize {
        self.segments().iter().map(|m| m.len()).sum()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dim(expected, actual))
    }
}

/// Weighted mean `sum(w_i * v_i) / sum(w_i)`.
pub fn weighted_sum(items: &[(&FlatVector, f64)]) -> Result<FlatVector> {
    let (first, _) = items
        .first()
        .ok_or_else(|| Error::Input("weighted_sum of no items".into()))?;
    let len = first.len();
    let mut total = 0.0;
    for (v, w) in items {
        check_len(len, v.len())?;
        if !(*w >= 0.0) || !w.is_finite() {
            return Err(Error::Input(format!(
                "weight {w} is not a nonnegative real"
            )));
        }
        total += w;
    }
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let mut out = vec![0.0; len];
    for (v, w) in items {
        let w = w / total;
        if w == 0.0 {
            continue;
        }
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    let out = FlatVector(out);
    if !out.is_finite() {
        return Err(Error::NonFinite("weighted_sum"));
    }
    Ok(out)
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &FlatVector, b: &FlatVector) -> Result<f64> {
    cosine_slices(a.as_slice(), b.as_slice())
}

pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Concatenate every segment in canonical order.
pub fn flatten<S: Segmented + ?Sized>(params: &S) -> FlatVector {
    let segments = params.segments();
    let mut out = Vec::with_capacity(segments.iter().map(|m| m.len()).sum());
    for seg in segments {
        out.extend_from_slice(seg.values());
    }
    FlatVector(out)
}

/// Write `v` into a copy of `shape_of`, segment by segment.
pub fn unflatten<S: Segmented + Clone>(v: &FlatVector, shape_of: &S) -> Result<S> {
    check_len(shape_of.param_count(), v.len())?;
    let mut out = shape_of.clone();
    let mut offset = 0;
    for seg in out.segments_mut() {
        let n = seg.len();
        seg.values_mut()
            .copy_from_slice(&v.as_slice()[offset..offset + n]);
        offset += n;
    }
    Ok(out)
}
