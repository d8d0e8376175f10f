//! Vector algebra over parameter lists.
//!
//! A list of tensors is treated as the flattened concatenation of its
//! elements. All results are constants.

use super::Tensor;
use crate::error::{Error, Result};

fn check(a: &[Tensor], b: &[Tensor]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "parameter lists of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    for (x, y) in a.iter().zip(b) {
        if x.numel() != y.numel() {
            return Err(Error::invalid(format!(
                "parameter shapes {:?} and {:?} differ",
                x.shape(),
                y.shape()
            )));
        }
    }
    Ok(())
}

pub fn dot(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    check(a, b)?;
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.data()
                .iter()
                .zip(y.data())
                .map(|(p, q)| p * q)
                .sum::<f64>()
        })
        .sum())
}

pub fn norm(a: &[Tensor]) -> f64 {
    a.iter()
        .map(|x| x.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub fn numel(a: &[Tensor]) -> usize {
    a.iter().map(Tensor::numel).sum()
}

pub fn zeros_like(a: &[Tensor]) -> Vec<Tensor> {
    a.iter().map(Tensor::zeros_like).collect()
}

pub fn detach(a: &[Tensor]) -> Vec<Tensor> {
    a.iter().map(Tensor::detach).collect()
}

/// `alpha * x + beta * y`.
pub fn lincomb(alpha: f64, x: &[Tensor], beta: f64, y: &[Tensor]) -> Result<Vec<Tensor>> {
    check(x, y)?;
    Ok(x.iter()
        .zip(y)
        .map(|(a, b)| {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| alpha * p + beta * q)
                .collect();
            Tensor::raw(a.shape().to_vec(), data)
        })
        .collect())
}

pub fn scale(alpha: f64, x: &[Tensor]) -> Vec<Tensor> {
    x.iter()
        .map(|a| {
            Tensor::raw(
                a.shape().to_vec(),
                a.data().iter().map(|p| alpha * p).collect(),
            )
        })
        .collect()
}

/// `y += alpha * x`, in place.
pub fn axpy(alpha: f64, x: &[Tensor], y: &mut [Tensor]) -> Result<()> {
    check(x, y)?;
    for (a, b) in x.iter().zip(y.iter_mut()) {
        for (q, p) in b.data_mut().iter_mut().zip(a.data()) {
            *q += alpha * p;
        }
    }
    Ok(())
}

pub fn all_finite(a: &[Tensor]) -> bool {
    a.iter().all(Tensor::all_finite)
}

/// Differentiable `sum_i <a_i, b_i>`; `b` is treated as constant.
pub(crate) fn contract(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    check(a, b)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        let term = x.dot(&y.detach())?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::invalid("empty parameter list"))
}
