//! Dense row-major matrices and the analytic forward/backward kernels used by
//! every model in the crate.
//!
//! All layers cache their inputs (or outputs) on the forward pass and expose a
//! matching backward that returns the gradient with respect to the input while
//! *accumulating* parameter gradients into [`ParamTensor::grad`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                op: "Matrix::new",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension {
                    op: "Matrix::from_rows",
                    left: (0, cols),
                    right: (i, r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A 1×n matrix.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    /// An n×1 matrix.
    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Selects rows by index, in the order given.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            let other_row = other.row(n);
            for (i, &a) in self.row(n).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(other_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (s, v) in sums.iter_mut().zip(self.row(r)) {
                *s += v;
            }
        }
        sums
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A learnable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(Matrix::zeros(rows, cols))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate(&mut self, g: &Matrix) -> Result<()> {
        self.grad.add_assign(g)
    }
}

/// `x · W + b`, with `b` broadcast over rows.
pub fn affine_forward(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if bias.len() != weight.cols() {
        return Err(Error::Dimension {
            op: "affine_forward(bias)",
            left: weight.shape(),
            right: (1, bias.len()),
        });
    }
    let mut out = x.matmul(weight)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
            *o += b;
        }
    }
    Ok(out)
}

/// Gradients of an affine map for one upstream signal.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub input: Matrix,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

pub fn affine_backward(upstream: &Matrix, x: &Matrix, weight: &Matrix) -> Result<AffineGrads> {
    if upstream.rows() != x.rows() || upstream.cols() != weight.cols() || x.cols() != weight.rows()
    {
        return Err(Error::Dimension {
            op: "affine_backward",
            left: upstream.shape(),
            right: (x.rows(), weight.cols()),
        });
    }
    Ok(AffineGrads {
        input: upstream.matmul_t(weight)?,
        weight: x.t_matmul(upstream)?,
        bias: upstream.column_sums(),
    })
}

/// Dense layer `x · W + b` owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: ParamTensor,
    /// `[1 × out]`
    pub bias: ParamTensor,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::Dimension {
                op: "Linear::new",
                left: weight.shape(),
                right: (1, bias.len()),
            });
        }
        Ok(Self {
            weight: ParamTensor::new(weight),
            bias: ParamTensor::new(Matrix::row_vector(bias)),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        affine_forward(x, &self.weight.value, self.bias.value.data())
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, upstream: &Matrix, x: &Matrix) -> Result<Matrix> {
        let g = affine_backward(upstream, x, &self.weight.value)?;
        self.weight.accumulate(&g.weight)?;
        for (acc, v) in self.bias.grad.data_mut().iter_mut().zip(&g.bias) {
            *acc += v;
        }
        Ok(g.input)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the cached pre-activation `x` (ReLU) or
    /// the cached output `out` (tanh, sigmoid).
    #[inline]
    pub fn derivative(self, x: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Sigmoid => out * (1.0 - out),
        }
    }

    pub fn forward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    /// `input` is the cached pre-activation, `output` the cached activation.
    pub fn backward(self, upstream: &Matrix, input: &Matrix, output: &Matrix) -> Result<Matrix> {
        if upstream.shape() != input.shape() || upstream.shape() != output.shape() {
            return Err(Error::Dimension {
                op: "Activation::backward",
                left: upstream.shape(),
                right: input.shape(),
            });
        }
        let data = upstream
            .data()
            .iter()
            .zip(input.data())
            .zip(output.data())
            .map(|((&u, &x), &o)| u * self.derivative(x, o))
            .collect();
        Matrix::new(upstream.rows(), upstream.cols(), data)
    }
}

/// Max-shifted softmax. Never overflows for finite input.
pub fn softmax_stable(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Vector-Jacobian product of softmax: `out ⊙ (upstream − ⟨upstream, out⟩)`.
pub fn softmax_backward(upstream: &[f64], out: &[f64]) -> Result<Vec<f64>> {
    if upstream.len() != out.len() {
        return Err(Error::Dimension {
            op: "softmax_backward",
            left: (1, upstream.len()),
            right: (1, out.len()),
        });
    }
    let inner = dot(upstream, out);
    Ok(upstream
        .iter()
        .zip(out)
        .map(|(&u, &p)| p * (u - inner))
        .collect())
}
