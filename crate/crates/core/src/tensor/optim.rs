//! Optimizers: a functional (differentiable) SGD for unrolled
//! differentiation and stateful in-place SGD/Adam.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Velocity buffers of the functional SGD update.
#[derive(Debug, Clone)]
pub struct MomentumState {
    velocities: Vec<Tensor>,
}

impl MomentumState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        MomentumState {
            velocities: params.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn velocities(&self) -> &[Tensor] {
        &self.velocities
    }

    /// Copy with every velocity cut from the graph.
    pub fn detached(&self) -> Self {
        MomentumState {
            velocities: self.velocities.iter().map(Tensor::detach).collect(),
        }
    }
}

/// `v' = momentum * v + g; theta' = theta - lr * v'`, producing new recorded
/// tensors so gradients flow back to `params`, `grads` and their ancestors.
pub fn sgd_step_functional(
    params: &[Tensor],
    grads: &[Tensor],
    lr: f64,
    momentum: f64,
    state: &MomentumState,
) -> Result<(Vec<Tensor>, MomentumState)> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::invalid(
            "params, grads and momentum state differ in length",
        ));
    }
    let mut new_params = Vec::with_capacity(params.len());
    let mut velocities = Vec::with_capacity(params.len());
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocities) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::invalid(format!(
                "sgd step: param {:?}, grad {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        let v_next = if momentum == 0.0 {
            g.clone()
        } else {
            v.scale(momentum).add(g)?
        };
        new_params.push(p.sub(&v_next.scale(lr))?);
        velocities.push(v_next);
    }
    Ok((new_params, MomentumState { velocities }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerHyper {
    fn default() -> Self {
        OptimizerHyper {
            lr: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
enum Slots {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>> },
}

/// Stateful optimizer that updates parameters in place without recording.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: OptimizerHyper,
    slots: Option<Slots>,
    steps: u64,
}

impl Optimizer {
    /// Uninitialized optimizer; call [`Optimizer::init`] before stepping.
    pub fn new(kind: OptimizerKind, hyper: OptimizerHyper) -> Self {
        Optimizer {
            kind,
            hyper,
            slots: None,
            steps: 0,
        }
    }

    pub fn init(&mut self, params: &[Tensor]) {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        self.slots = Some(match self.kind {
            OptimizerKind::Sgd => Slots::Sgd { velocity: zeros() },
            OptimizerKind::Adam => Slots::Adam {
                m: zeros(),
                v: zeros(),
            },
        });
        self.steps = 0;
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn hyper(&self) -> &OptimizerHyper {
        &self.hyper
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn apply(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        let Some(slots) = self.slots.as_mut() else {
            return Err(Error::state("optimizer state not initialized"));
        };
        if params.len() != grads.len() {
            return Err(Error::invalid("params and grads differ in length"));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.numel() {
                return Err(Error::invalid(format!(
                    "param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let h = self.hyper;
        self.steps += 1;
        match slots {
            Slots::Sgd { velocity } => {
                if velocity.len() != params.len() {
                    return Err(Error::state("optimizer initialized for other parameters"));
                }
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    let data = p.data_mut();
                    for ((x, &gi), vi) in data.iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        let step = if h.momentum == 0.0 {
                            gi
                        } else {
                            *vi = h.momentum * *vi + gi;
                            *vi
                        };
                        *x -= h.lr * step;
                    }
                }
            }
            Slots::Adam { m, v } => {
                if m.len() != params.len() {
                    return Err(Error::state("optimizer initialized for other parameters"));
                }
                let t = self.steps as i32;
                let bc1 = 1.0 - h.beta1.powi(t);
                let bc2 = 1.0 - h.beta2.powi(t);
                for (((p, g), mi), vi) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let data = p.data_mut();
                    for (j, x) in data.iter_mut().enumerate() {
                        let gj = g.data()[j];
                        mi[j] = h.beta1 * mi[j] + (1.0 - h.beta1) * gj;
                        vi[j] = h.beta2 * vi[j] + (1.0 - h.beta2) * gj * gj;
                        let mhat = mi[j] / bc1;
                        let vhat = vi[j] / bc2;
                        *x -= h.lr * mhat / (vhat.sqrt() + h.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad, Tape};

    #[test]
    fn functional_sgd_plain_step() {
        let p = [Tensor::vector(&[1.0])];
        let g = [Tensor::vector(&[2.0])];
        let (next, _) =
            sgd_step_functional(&p, &g, 0.1, 0.0, &MomentumState::zeros_like(&p)).unwrap();
        assert!((next[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn functional_sgd_momentum_two_steps() {
        let p0 = [Tensor::vector(&[1.0])];
        let g = [Tensor::vector(&[1.0])];
        let s0 = MomentumState::zeros_like(&p0);
        let (p1, s1) = sgd_step_functional(&p0, &g, 0.1, 0.9, &s0).unwrap();
        let (p2, s2) = sgd_step_functional(&p1, &g, 0.1, 0.9, &s1).unwrap();
        assert_eq!(s1.velocities()[0].data(), &[1.0]);
        assert!((s2.velocities()[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p1[0].data()[0] - 0.9).abs() < 1e-15);
        assert!((p2[0].data()[0] - 0.71).abs() < 1e-15);
        // inputs untouched
        assert_eq!(p0[0].data(), &[1.0]);
    }

    #[test]
    fn functional_sgd_differentiates_through_grad() {
        // inner C = 1/2 (w - lam)^2, w' = w - lr * (w - lam): dw'/dlam = lr
        let lam = Tensor::vector(&[0.5]).requires_grad();
        let w = Tensor::vector(&[2.0]).requires_grad();
        let c = w.sub(&lam).unwrap().square().scale(0.5).sum();
        let g = grad(&c, std::slice::from_ref(&w), true).unwrap();
        let (next, _) =
            sgd_step_functional(&[w], &g, 0.3, 0.0, &MomentumState::zeros_like(&g)).unwrap();
        let d = grad(&next[0].sum(), &[lam], false).unwrap();
        assert!((d[0].data()[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sgd_apply_in_place() {
        let mut p = vec![Tensor::vector(&[1.0]).requires_grad()];
        let id = p[0].node_id();
        let mut opt = Optimizer::new(
            OptimizerKind::Sgd,
            OptimizerHyper {
                lr: 0.1,
                ..Default::default()
            },
        );
        opt.init(&p);
        let before = Tape::nodes_created();
        opt.apply(&mut p, &[Tensor::vector(&[2.0])]).unwrap();
        assert_eq!(Tape::nodes_created(), before);
        assert!((p[0].data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p[0].node_id(), id);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Tensor::vector(&[1.0, -2.0])];
        let mut opt = Optimizer::new(
            OptimizerKind::Adam,
            OptimizerHyper {
                lr: 1e-3,
                ..Default::default()
            },
        );
        opt.init(&p);
        opt.apply(&mut p, &[Tensor::vector(&[1.0, 1.0])]).unwrap();
        assert!((p[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p[0].data()[1] - (-2.0 - 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn uninitialized_state_rejected() {
        let mut p = vec![Tensor::vector(&[1.0])];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, OptimizerHyper::default());
        let err = opt.apply(&mut p, &[Tensor::vector(&[1.0])]).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
    }

    #[test]
    fn optimizers_are_isolated() {
        let mut a = vec![Tensor::vector(&[1.0])];
        let mut b = vec![Tensor::vector(&[1.0])];
        let hyper = OptimizerHyper {
            lr: 0.1,
            momentum: 0.9,
            ..Default::default()
        };
        let mut oa = Optimizer::new(OptimizerKind::Sgd, hyper);
        let mut ob = Optimizer::new(OptimizerKind::Sgd, hyper);
        oa.init(&a);
        ob.init(&b);
        for _ in 0..3 {
            oa.apply(&mut a, &[Tensor::vector(&[1.0])]).unwrap();
        }
        ob.apply(&mut b, &[Tensor::vector(&[1.0])]).unwrap();
        assert!((b[0].data()[0] - 0.9).abs() < 1e-15);
        assert!(a[0].data()[0] < 0.5);
    }
}
