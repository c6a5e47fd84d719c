//! Dense linear algebra and hand-derived reverse-mode gradients for small
//! multilayer perceptrons.
//!
//! Everything is `f64`. Matrix products parallelise over output rows through
//! [`Exec`]; each output element is always accumulated in the same order, so
//! results do not depend on how many threads run them.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::exec::Exec;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("backward called before a forward pass was recorded")]
    NoForwardPass,
    #[error("non-finite gradient in tensor {tensor} at element {index}; update rejected")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    /// Builds a matrix from row-major data. Panics on a length mismatch.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length must be rows * cols");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::from_vec(r, c, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix::from_vec(indices.len(), self.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum over rows, producing one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_with(Exec::default(), a, b)
}

pub fn matmul_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NumericsError::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    exec.for_each_row(&mut out.data, n, m * k * n, |i, row| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    });
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(NumericsError::Shape {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(k, n);
    exec.for_each_row(&mut out.data, n, m * k * n, |p, row| {
        for i in 0..m {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    });
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt_with(exec: Exec, a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(NumericsError::Shape {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    exec.for_each_row(&mut out.data, n, m * k * n, |i, row| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            *o = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    });
    Ok(out)
}

/// `x · w + b`, with `b` broadcast over rows.
pub fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    affine_with(Exec::default(), x, w, b)
}

pub fn affine_with(exec: Exec, x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols {
        return Err(NumericsError::Shape {
            op: "affine bias",
            left: w.shape(),
            right: (1, b.len()),
        });
    }
    let mut out = matmul_with(exec, x, w)?;
    for row in out.data.chunks_mut(w.cols.max(1)) {
        for (o, bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
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

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's own output `y`.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn forward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    /// Gradient wrt the activation input, given its output and the upstream gradient.
    pub fn backward(self, output: &Matrix, upstream: &Matrix) -> Result<Matrix> {
        if output.shape() != upstream.shape() {
            return Err(NumericsError::Shape {
                op: "activation backward",
                left: output.shape(),
                right: upstream.shape(),
            });
        }
        let data = output
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&y, &g)| g * self.derivative_from_output(y))
            .collect();
        Ok(Matrix::from_vec(output.rows, output.cols, data))
    }
}

pub fn activation_forward(x: &Matrix, kind: Activation) -> Matrix {
    kind.forward(x)
}

/// Fully connected layer `y = x · W + b`, `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Input recorded by [`Dense::forward_traced`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct DenseTrace {
    input: Option<Matrix>,
}

impl DenseTrace {
    pub fn is_recorded(&self) -> bool {
        self.input.is_some()
    }
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weights: Matrix::from_vec(fan_in, fan_out, data),
            bias: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    #[inline]
    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn forward(&self, exec: Exec, x: &Matrix) -> Result<Matrix> {
        affine_with(exec, x, &self.weights, &self.bias)
    }

    pub fn forward_traced(&self, exec: Exec, x: &Matrix, trace: &mut DenseTrace) -> Result<Matrix> {
        let out = self.forward(exec, x)?;
        trace.input = Some(x.clone());
        Ok(out)
    }

    /// Returns the gradient wrt the layer input and the parameter gradients.
    pub fn backward(&self, exec: Exec, trace: &DenseTrace, upstream: &Matrix) -> Result<(Matrix, Dense)> {
        let input = trace.input.as_ref().ok_or(NumericsError::NoForwardPass)?;
        if upstream.rows() != input.rows() || upstream.cols() != self.fan_out() {
            return Err(NumericsError::Shape {
                op: "dense backward",
                left: (input.rows(), self.fan_out()),
                right: upstream.shape(),
            });
        }
        let weights = matmul_tn_with(exec, input, upstream)?;
        let bias = upstream.column_sums();
        let dx = matmul_nt_with(exec, upstream, &self.weights)?;
        Ok((dx, Dense { weights, bias }))
    }
}

/// A collection of parameter tensors visited in a fixed order.
pub trait ParameterSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl ParameterSet for Dense {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.weights.data(), &self.bias]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.data_mut(), &mut self.bias]
    }
}

/// Plain gradient descent: `p ← p − lr·g` for every scalar.
///
/// Rejects the whole update if any gradient is non-finite; nothing is
/// modified in that case.
pub fn sgd_step<P, G>(params: &P, grads: &G, lr: f64) -> Result<P>
where
    P: ParameterSet + Clone,
    G: ParameterSet,
{
    if !lr.is_finite() || lr < 0.0 {
        return Err(NumericsError::InvalidLearningRate(lr));
    }
    let grad_tensors = grads.tensors();
    {
        let param_tensors = params.tensors();
        if param_tensors.len() != grad_tensors.len()
            || param_tensors.iter().zip(&grad_tensors).any(|(p, g)| p.len() != g.len())
        {
            return Err(NumericsError::Shape {
                op: "sgd_step",
                left: (param_tensors.len(), params.parameter_count()),
                right: (grad_tensors.len(), grads.parameter_count()),
            });
        }
    }
    for (t, g) in grad_tensors.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFiniteGradient { tensor: t, index });
        }
    }
    let mut next = params.clone();
    for (p, g) in next.tensors_mut().into_iter().zip(grad_tensors) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    }
    Ok(next)
}
