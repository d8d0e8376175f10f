//! Batch losses. Classification targets are one-hot (or probability) rows.

use super::Tensor;
use crate::error::{Error, Result};

/// Mean squared error over all elements.
pub fn mse(predictions: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if predictions.shape() != targets.shape() {
        return Err(Error::invalid(format!(
            "mse: predictions {:?} vs targets {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    Ok(predictions.sub(targets)?.square().mean())
}

/// Cross-entropy of each row of `logits` against `targets`, as an `[n, 1]` column.
pub fn per_sample_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 || logits.shape() != targets.shape() {
        return Err(Error::invalid(format!(
            "cross entropy: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    Ok(targets.mul(&logits.log_softmax()?)?.sum_rows()?.neg())
}

pub fn softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    Ok(per_sample_cross_entropy(logits, targets)?.mean())
}

/// Mean of `weights[i] * loss_i`; one weight per sample.
pub fn weighted_softmax_cross_entropy(
    logits: &Tensor,
    targets: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let per_sample = per_sample_cross_entropy(logits, targets)?;
    let n = per_sample.shape()[0];
    if weights.numel() != n {
        return Err(Error::invalid(format!(
            "{} weights for a batch of {n}",
            weights.numel()
        )));
    }
    let weights = weights.reshape(&[n, 1])?;
    Ok(weights.mul(&per_sample)?.mean())
}
