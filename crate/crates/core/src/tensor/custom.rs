use std::fmt::Debug;
use std::sync::Arc;

use super::tape::Op;
use super::Tensor;
use crate::error::Result;

/// User-defined elementwise op.
///
/// `backward` receives the op's input and the upstream gradient and must be
/// written with tensor ops so that it stays differentiable.
pub trait CustomUnary: Send + Sync + Debug {
    fn name(&self) -> &str;
    fn forward(&self, x: &[f64]) -> Vec<f64>;
    fn backward(&self, x: &Tensor, grad: &Tensor) -> Result<Tensor>;
}

impl Tensor {
    pub fn apply_custom(&self, op: Arc<dyn CustomUnary>) -> Result<Tensor> {
        let data = op.forward(self.data());
        let out = Tensor::new(self.shape(), data)?;
        Ok(Tensor::from_op(
            out.shape().to_vec(),
            out.to_vec(),
            Op::Custom(op),
            &[self],
        ))
    }
}
