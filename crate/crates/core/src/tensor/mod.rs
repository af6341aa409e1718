//! Dense row-major `f32` matrices and the handful of kernels the layers need.
//!
//! Every kernel is a pure function of its inputs. Nothing broadcasts: adding a
//! bias row is its own named operation.

mod gemm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 32-bit reals. Both dimensions are positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics on a zero dimension.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::Shape {
                    op: "Matrix::from_rows",
                    left: (rows.len(), cols),
                    right: (1, r.as_ref().len()),
                });
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn row_vector(values: &[f32]) -> Result<Self> {
        Self::new(1, values.len(), values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.cols)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.ensure_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Matrix, scale: f32) -> Result<Matrix> {
        self.ensure_same_shape(other, "add_scaled")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn scale(&self, factor: f32) -> Matrix {
        let data = self.data.iter().map(|v| v * factor).collect();
        Matrix { data, ..*self }
    }

    pub fn scale_in_place(&mut self, factor: f32) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape {
                op: "add_row_bias",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        for row in self.data.chunks_exact_mut(self.cols) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        Ok(())
    }

    /// Stacks `self` on top of `below`.
    pub fn concat_rows(&self, below: &Matrix) -> Result<Matrix> {
        if self.cols != below.cols {
            return Err(Error::Shape {
                op: "concat_rows",
                left: self.shape(),
                right: below.shape(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + below.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&below.data);
        Ok(Matrix {
            rows: self.rows + below.rows,
            cols: self.cols,
            data,
        })
    }

    /// Places `parts` side by side.
    pub fn concat_cols(parts: &[Matrix]) -> Result<Matrix> {
        let first = parts.first().ok_or(Error::Shape {
            op: "concat_cols",
            left: (0, 0),
            right: (0, 0),
        })?;
        let rows = first.rows;
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                if p.rows != rows {
                    return Err(Error::Shape {
                        op: "concat_cols",
                        left: first.shape(),
                        right: p.shape(),
                    });
                }
                data.extend_from_slice(p.row(i));
            }
        }
        Matrix::new(rows, cols, data)
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&self, start: usize, width: usize) -> Result<Matrix> {
        if width == 0 || start + width > self.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                left: self.shape(),
                right: (start, width),
            });
        }
        let mut data = Vec::with_capacity(self.rows * width);
        for row in self.row_iter() {
            data.extend_from_slice(&row[start..start + width]);
        }
        Matrix::new(self.rows, width, data)
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Matrix> {
        if count == 0 || start + count > self.rows {
            return Err(Error::Shape {
                op: "slice_rows",
                left: self.shape(),
                right: (start, count),
            });
        }
        Matrix::new(
            count,
            self.cols,
            self.data[start * self.cols..(start + count) * self.cols].to_vec(),
        )
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f32::max)
    }

    fn ensure_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// Matrix product `a * b`, or `a * b^T` when `transpose_b` is set.
pub fn matmul(a: &Matrix, b: &Matrix, transpose_b: bool) -> Result<Matrix> {
    matmul_threads(a, b, transpose_b, 1)
}

/// Row-parallel [`matmul`]. The result is bitwise identical for every worker count.
pub fn matmul_threads(a: &Matrix, b: &Matrix, transpose_b: bool, threads: usize) -> Result<Matrix> {
    matmul_into(a, b, transpose_b, threads, Vec::new())
}

/// [`matmul_threads`] writing into a recycled allocation.
pub(crate) fn matmul_into(
    a: &Matrix,
    b: &Matrix,
    transpose_b: bool,
    threads: usize,
    buffer: Vec<f32>,
) -> Result<Matrix> {
    let (k_b, n) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != k_b {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let data = gemm::gemm(
        &a.data,
        a.rows,
        a.cols,
        &b.data,
        n,
        transpose_b,
        threads,
        buffer,
    );
    Matrix::new(a.rows, n, data)
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(out.cols) {
        softmax_in_place(row);
    }
    out
}

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Per-row layer normalization with population variance.
pub fn layer_norm(m: &Matrix, gain: &[f32], bias: &[f32], epsilon: f32) -> Result<Matrix> {
    if gain.len() != m.cols || bias.len() != m.cols {
        return Err(Error::Shape {
            op: "layer_norm",
            left: m.shape(),
            right: (gain.len(), bias.len()),
        });
    }
    let d = m.cols as f32;
    let mut out = m.clone();
    for row in out.data.chunks_exact_mut(m.cols) {
        let mean = row.iter().sum::<f32>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
        let inv = 1.0 / (var + epsilon).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gain).zip(bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    Ok(out)
}

/// Per-channel 1-D convolution over time with "same" zero padding.
///
/// `kernel` is `k x d`; row `j` multiplies the input frame at offset `j - (k-1)/2`.
pub fn depthwise_conv1d(m: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    let (k, d) = kernel.shape();
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise kernel size must be odd, got {k}"
        )));
    }
    if d != m.cols {
        return Err(Error::Shape {
            op: "depthwise_conv1d",
            left: m.shape(),
            right: kernel.shape(),
        });
    }
    let t_len = m.rows as isize;
    let half = (k / 2) as isize;
    let mut out = Matrix::zeros(m.rows, d);
    for t in 0..t_len {
        let dst = out.row_mut(t as usize);
        for j in 0..k as isize {
            let src_t = t + j - half;
            if src_t < 0 || src_t >= t_len {
                continue;
            }
            let src = m.row(src_t as usize);
            let w = kernel.row(j as usize);
            for c in 0..d {
                dst[c] += w[c] * src[c];
            }
        }
    }
    Ok(out)
}

/// Pointwise non-linearities. `Glu` halves the column count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Swish,
    Gelu,
    Glu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Swish => "swish",
            Activation::Gelu => "gelu",
            Activation::Glu => "glu",
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f32) -> f32 {
    // tanh approximation
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn pointwise_nonlinear(m: &Matrix, kind: Activation) -> Result<Matrix> {
    match kind {
        Activation::Relu => Ok(map(m, |v| v.max(0.0))),
        Activation::Swish => Ok(map(m, |v| v * sigmoid(v))),
        Activation::Gelu => Ok(map(m, gelu)),
        Activation::Glu => {
            if !m.cols.is_multiple_of(2) {
                return Err(Error::Shape {
                    op: "glu",
                    left: m.shape(),
                    right: (m.cols / 2, 2),
                });
            }
            let half = m.cols / 2;
            let mut out = Matrix::zeros(m.rows, half);
            for (src, dst) in m.row_iter().zip(out.data.chunks_exact_mut(half)) {
                let (value, gate) = src.split_at(half);
                for ((o, v), g) in dst.iter_mut().zip(value).zip(gate) {
                    *o = v * sigmoid(*g);
                }
            }
            Ok(out)
        }
    }
}

fn map(m: &Matrix, f: impl Fn(f32) -> f32) -> Matrix {
    Matrix {
        data: m.data.iter().map(|&v| f(v)).collect(),
        ..*m
    }
}
