//! Second-order products by differentiating a recorded backward pass.

use super::backward::grad;
use super::flat;
use super::Tensor;
use crate::error::Result;

/// Matrix-free access to second derivatives of a scalar `output`.
///
/// Holds the gradient of `output` with respect to `params`, recorded with
/// `create_graph`, so every product only pays for one extra backward pass.
pub struct HessianOperator {
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl HessianOperator {
    pub fn new(output: &Tensor, params: &[Tensor]) -> Result<Self> {
        let grads = grad(output, params, true)?;
        Ok(HessianOperator {
            params: params.to_vec(),
            grads,
        })
    }

    /// First derivatives of the output (recorded).
    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// `H v` where `H` is the Hessian with respect to the parameters.
    pub fn apply(&self, v: &[Tensor]) -> Result<Vec<Tensor>> {
        self.mixed(&self.params, v)
    }

    /// `u^T d^2 output / (d targets d params)`, shaped like `targets`.
    pub fn mixed(&self, targets: &[Tensor], u: &[Tensor]) -> Result<Vec<Tensor>> {
        let s = flat::contract(&self.grads, u)?;
        grad(&s, targets, false)
    }
}

/// Hessian-vector product of `output` with respect to `params`.
pub fn hvp(output: &Tensor, params: &[Tensor], v: &[Tensor]) -> Result<Vec<Tensor>> {
    HessianOperator::new(output, params)?.apply(v)
}

/// Mixed second-derivative product `u^T d^2 output / (d lambda d w)`.
pub fn cross_vjp(
    output: &Tensor,
    w_params: &[Tensor],
    lambda_params: &[Tensor],
    u: &[Tensor],
) -> Result<Vec<Tensor>> {
    HessianOperator::new(output, w_params)?.mixed(lambda_params, u)
}
