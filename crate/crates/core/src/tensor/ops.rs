//! Forward implementations of the differentiable ops.

use super::tape::Op;
use super::Tensor;
use crate::error::{Error, Result};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn broadcast_shape(&self, other: &Tensor, what: &str) -> Result<Vec<usize>> {
        if self.shape() == other.shape() || other.is_scalar() {
            Ok(self.shape().to_vec())
        } else if self.is_scalar() {
            Ok(other.shape().to_vec())
        } else {
            Err(Error::invalid(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )))
        }
    }

    fn binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let shape = self.broadcast_shape(other, op.name())?;
        let (a, b) = (self.data(), other.data());
        let data = match (a.len(), b.len()) {
            (n, m) if n == m => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
            (_, 1) => a.iter().map(|&x| f(x, b[0])).collect(),
            _ => b.iter().map(|&y| f(a[0], y)).collect(),
        };
        Ok(Tensor::from_op(shape, data, op, &[self, other]))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.shape().to_vec(), data, op, &[self])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |x| -x)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
            return Err(Error::NumericalDomain(format!(
                "log of non-positive entry {bad}"
            )));
        }
        Ok(self.unary(Op::Log, f64::ln))
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |x| c * x)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self).expect("same shape")
    }

    /// `c - self`.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        Tensor::scalar(c).sub(self).expect("scalar broadcast")
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.add(&Tensor::scalar(c)).expect("scalar broadcast")
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(Error::invalid(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::invalid(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (a, b) = (self.data(), other.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        Ok(Tensor::from_op(vec![n, m], out, Op::MatMul, &[self, other]))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let (n, m) = (self.shape()[0], self.shape()[1]);
        let a = self.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = a[i * m + j];
            }
        }
        Ok(Tensor::from_op(vec![m, n], out, Op::Transpose, &[self]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape()
            )));
        }
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape,
            &[self],
        ))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(Vec::new(), vec![s], Op::Sum, &[self])
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "expand needs a single element, got {:?}",
                self.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::invalid("expand to zero-size shape"));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            vec![self.data()[0]; numel],
            Op::Expand,
            &[self],
        ))
    }

    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.numel() != other.numel() {
            return Err(Error::invalid(format!(
                "dot of {} and {} elements",
                self.numel(),
                other.numel()
            )));
        }
        let other = other.reshape(self.shape())?;
        Ok(self.mul(&other)?.sum())
    }

    pub fn sqnorm(&self) -> Tensor {
        self.dot(self).expect("same tensor")
    }

    /// Row-wise log-softmax of a rank-2 tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid(format!(
                "log_softmax needs rank 2, got {:?}",
                self.shape()
            )));
        }
        let c = self.shape()[1];
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LogSoftmax,
            &[self],
        ))
    }

    pub fn softmax(&self) -> Result<Tensor> {
        Ok(self.log_softmax()?.exp())
    }

    /// Sum over columns of a rank-2 tensor: `[n, c] -> [n, 1]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::invalid("sum_rows needs rank 2"));
        }
        self.matmul(&Tensor::ones(&[self.shape()[1], 1])?)
    }

    /// Add a bias vector of length `m` to every row of an `[n, m]` tensor.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || bias.numel() != self.shape()[1] {
            return Err(Error::invalid(format!(
                "add_row: bias of {} elements for shape {:?}",
                bias.numel(),
                self.shape()
            )));
        }
        let ones = Tensor::ones(&[self.shape()[0], 1])?;
        let spread = ones.matmul(&bias.reshape(&[1, bias.numel()])?)?;
        self.add(&spread)
    }

    /// Broadcast an `[n, 1]` column across `m` columns.
    pub fn repeat_cols(&self, m: usize) -> Result<Tensor> {
        if self.rank() != 2 || self.shape()[1] != 1 {
            return Err(Error::invalid("repeat_cols needs an [n, 1] tensor"));
        }
        self.matmul(&Tensor::ones(&[1, m])?)
    }
}
