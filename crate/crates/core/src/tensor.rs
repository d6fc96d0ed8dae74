//! Dense row-major `f32` tensors and the handful of kernels the backbone needs.
//!
//! Every public operation either returns a tensor whose values are all finite
//! or fails with [`TensorError::NonFinite`]. Reductions run in a fixed loop
//! order so repeated calls are bit-identical.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::TensorError;

/// Shape of a tensor, printed as `[a×b×c]` in error messages.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("×")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str("]")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_finite(data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

impl Tensor {
    /// Builds a tensor, validating the shape and rejecting NaN/Inf.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::InvalidShape(Shape(shape.to_vec())));
        }
        let shape = Shape(shape.to_vec());
        if shape.numel() != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    fn finish(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0) && value.is_finite(),
            "invalid tensor shape {shape:?} or fill value {value}"
        );
        let n = shape.iter().product();
        Self {
            shape: Shape(shape.to_vec()),
            data: vec![value; n],
        }
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.dims())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        &self.shape.0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for optimizers and tests. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        if self.shape.rank() == 1 {
            1
        } else {
            self.data.len() / self.last_dim()
        }
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.0.last().expect("rank >= 1")
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let n = self.last_dim();
        &self.data[r * n..(r + 1) * n]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let target = Shape(shape.to_vec());
        if shape.contains(&0) || target.numel() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: target,
            });
        }
        self.shape = target;
        Ok(self)
    }

    fn require_same_shape(&self, other: &Tensor, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor, TensorError> {
        self.require_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::finish(self.shape.clone(), data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor, TensorError> {
        Self::finish(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f32) -> Result<Tensor, TensorError> {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor, TensorError> {
        self.map(|v| v + s)
    }

    /// `self + s * other`, the Euler update.
    pub fn axpy(&self, s: f32, other: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(other, "axpy", |a, b| a + s * b)
    }

    /// Adds `other` in place. Used for residual streams and gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        self.require_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        check_finite(&self.data)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        let n = self.last_dim();
        if v.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vector",
                lhs: self.shape.clone(),
                rhs: v.shape.clone(),
            });
        }
        let data = self
            .data
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(&v.data).map(|(&a, &b)| a + b))
            .collect();
        Self::finish(self.shape.clone(), data)
    }

    /// Sums the rows of an `m×n` matrix into a length-`n` vector.
    pub fn sum_rows(&self) -> Tensor {
        let n = self.last_dim();
        let mut out = vec![0.0f32; n];
        for row in self.data.chunks_exact(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: Shape(vec![n]),
            data: out,
        }
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: Shape(vec![n, m]),
            data: out,
        })
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match *self.shape.0.as_slice() {
            [m, n] => Ok((m, n)),
            [n] => Ok((1, n)),
            _ => Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    /// Matrix product. For each output entry the sum runs over `k` in
    /// ascending order, exactly like the textbook triple loop.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 || self.shape.rank() != 2 || other.shape.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::finish(Shape(vec![m, n]), out)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor, TensorError> {
        let rank = self.shape.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { axis, rank });
        }
        let dims = &self.shape.0;
        let len = dims[axis];
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| out[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f32;
                for j in 0..len {
                    let e = libm::expf(out[idx(j)] - max);
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        Self::finish(self.shape.clone(), out)
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor, TensorError> {
        let n = self.last_dim();
        if gamma.len() != n || beta.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape.clone(),
                rhs: gamma.shape.clone(),
            });
        }
        let (normed, _) = self.normalize_rows(eps);
        let mut data = normed.data;
        for row in data.chunks_exact_mut(n) {
            for ((v, &g), &b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
                *v = *v * g + b;
            }
        }
        Self::finish(self.shape.clone(), data)
    }

    /// Normalizes each row to zero mean and unit variance. Returns the
    /// normalized tensor and the per-row inverse standard deviations, which
    /// the backward pass needs.
    pub fn normalize_rows(&self, eps: f32) -> (Tensor, Vec<f32>) {
        let n = self.last_dim();
        let mut data = self.data.clone();
        let mut inv_std = Vec::with_capacity(self.rows());
        for row in data.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
            let denom = libm::sqrtf(var + eps);
            // Zero variance with eps = 0: every centred value is 0 anyway.
            let inv = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        (
            Tensor {
                shape: self.shape.clone(),
                data,
            },
            inv_std,
        )
    }

    pub fn gelu(&self) -> Result<Tensor, TensorError> {
        self.map(gelu)
    }

    pub fn silu(&self) -> Result<Tensor, TensorError> {
        self.map(silu)
    }

    /// Concatenates two matrices with equal row counts along the last axis.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, a) = self.as_matrix("concat_cols")?;
        let (m2, b) = other.as_matrix("concat_cols")?;
        if m != m2 {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * (a + b));
        for r in 0..m {
            data.extend_from_slice(&self.data[r * a..(r + 1) * a]);
            data.extend_from_slice(&other.data[r * b..(r + 1) * b]);
        }
        Ok(Tensor {
            shape: Shape(vec![m, a + b]),
            data,
        })
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.as_matrix("slice_cols")?;
        if start + width > n || width == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: self.shape.clone(),
                rhs: Shape(vec![start, width]),
            });
        }
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&self.data[r * n + start..r * n + start + width]);
        }
        Ok(Tensor {
            shape: Shape(vec![m, width]),
            data,
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// tanh approximation of GELU.
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + libm::tanhf(C * (x + 0.044_715 * x * x * x)))
}

pub fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044_715 * x * x * x);
    let th = libm::tanhf(inner);
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + libm::expf(-x));
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = t(&[1, 2], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2×3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = t(&[2], &[1000.0, 1000.0]).softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = t(&[2], &[0.0, libm::logf(3.0)]).softmax(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_axis_out_of_range() {
        assert!(matches!(
            Tensor::zeros(&[2, 2]).softmax(2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let s = x.softmax(0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = t(&[1, 3], &[5.0, 5.0, 5.0]).layer_norm(&one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let y = t(&[1, 2], &[1.0, 3.0]).layer_norm(&one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);

        let beta = Tensor::full(&[2], 7.0);
        let y = t(&[2, 2], &[1.0, -4.0, 0.5, 9.0])
            .layer_norm(&Tensor::zeros(&[2]), &beta, 1e-5)
            .unwrap();
        assert_eq!(y.data(), &[7.0; 4]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.5, 0.25, 8.0]);
        let y = x
            .layer_norm(&Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 0.0)
            .unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            Tensor::from_vec(&[2], alloc::vec![1.0, f32::NAN]),
            Err(TensorError::NonFinite { index: 1 })
        ));
        let big = t(&[1], &[3.0e38]);
        assert!(big.add(&big).is_err());
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-3f32;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3, "x={x}");
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-3, "x={x}");
        }
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = a.concat_cols(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.slice_cols(0, 1).unwrap(), a);
        assert_eq!(c.slice_cols(1, 2).unwrap(), b);
    }
}
