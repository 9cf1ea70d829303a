//! Dense row-major `f64` tensors and the eager kernels the tape is built on.
//!
//! Tensors here are rank 0, 1 or 2. Every kernel validates shapes and
//! reports mismatches through [`Error::Shape`], naming the operation.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {} elements, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            _ => 1,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.squared_norm().sqrt()
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &[&self.shape, &other.shape]));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    /// Multiplies every entry by the value of a one-element tensor.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor> {
        let c = s
            .item()
            .ok_or_else(|| Error::shape("mul_scalar", &[&self.shape, &s.shape]))?;
        Ok(self.scale(c))
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Heaviside step with `step(0) = 0`, the derivative of [`Tensor::relu`].
    pub fn step(&self) -> Tensor {
        self.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt)
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn sum(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::shape("matmul", &[&self.shape, &other.shape]));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * n..(p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", &[&self.shape]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Sums a matrix along `axis`: axis 0 gives a `[cols]` vector, axis 1 a `[rows]` vector.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if self.rank() != 2 || axis > 1 {
            return Err(Error::shape("sum_axis", &[&self.shape]));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let data = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for (o, &v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                    *o += v;
                }
            }
            out
        } else {
            (0..m)
                .map(|i| self.data[i * n..(i + 1) * n].iter().sum())
                .collect()
        };
        Ok(Tensor::vector(data))
    }

    /// Inverse of [`Tensor::sum_axis`]: replicates a vector into a matrix.
    ///
    /// Axis 0 stacks a `[n]` vector as `count` identical rows (`[count, n]`);
    /// axis 1 repeats each entry of a `[m]` vector across `count` columns (`[m, count]`).
    pub fn broadcast_axis(&self, axis: usize, count: usize) -> Result<Tensor> {
        if self.rank() != 1 || axis > 1 {
            return Err(Error::shape("broadcast_axis", &[&self.shape]));
        }
        let len = self.shape[0];
        let (shape, data) = if axis == 0 {
            let mut d = Vec::with_capacity(count * len);
            for _ in 0..count {
                d.extend_from_slice(&self.data);
            }
            (vec![count, len], d)
        } else {
            let mut d = Vec::with_capacity(count * len);
            for &v in &self.data {
                d.extend(std::iter::repeat_n(v, count));
            }
            (vec![len, count], d)
        };
        Ok(Tensor { shape, data })
    }

    pub fn broadcast_scalar(&self, shape: &[usize]) -> Result<Tensor> {
        let v = self
            .item()
            .ok_or_else(|| Error::shape("broadcast", &[&self.shape, shape]))?;
        Ok(Tensor::full(shape, v))
    }

    /// Row-wise log-softmax of a matrix, computed with the max-shift for stability.
    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("log_softmax", &[&self.shape]));
        }
        let n = self.shape[1];
        let mut out = self.data.clone();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() != 2 || indices.iter().any(|&i| i >= self.shape[0]) {
            return Err(Error::shape("gather_rows", &[&self.shape, &[indices.len()]]));
        }
        let n = self.shape[1];
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.data[i * n..(i + 1) * n]);
        }
        Ok(Tensor {
            shape: vec![indices.len(), n],
            data,
        })
    }

    /// Adjoint of [`Tensor::gather_rows`]: row `k` is added into output row `indices[k]`.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        if self.rank() != 2 || self.shape[0] != indices.len() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::shape("scatter_rows", &[&self.shape, &[indices.len()], &[rows]]));
        }
        let n = self.shape[1];
        let mut data = vec![0.0; rows * n];
        for (k, &i) in indices.iter().enumerate() {
            for (o, &v) in data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(&self.data[k * n..(k + 1) * n])
            {
                *o += v;
            }
        }
        Ok(Tensor {
            shape: vec![rows, n],
            data,
        })
    }

    /// Index of the largest entry in each row; ties go to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let n = self.cols();
        self.data
            .chunks(n)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
