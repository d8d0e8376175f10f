//! Best-response Jacobian-vector products.
//!
//! Every algorithm returns `v^T dw*/dlambda`, shaped like `lambda`, where `w*`
//! is a lower problem's (approximate) optimum and `lambda` the parameters of
//! one of its constraining problems. The lower problem's configuration picks
//! the algorithm. AID variants re-evaluate the lower cost at the current
//! parameters on the batch of its latest step; ITD replays the recorded unroll.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::problem::{Batch, JacobianAlgo, Problem};
use crate::tensor::{flat, grad, vjp, HessianOperator, Tensor};

pub struct BestResponseVjpRequest<'a> {
    pub lower: &'a Problem,
    /// Constraining-problem tensors seen by the lower cost.
    pub collaborators: &'a BTreeMap<String, Vec<Tensor>>,
    pub wrt: &'a str,
    pub v: &'a [Tensor],
}

#[derive(Debug, Clone)]
pub struct VjpOutcome {
    pub value: Vec<Tensor>,
    /// Solver iterations (Neumann terms, CG steps); zero for ITD and FD.
    pub iterations: usize,
    pub warning: Option<String>,
}

impl VjpOutcome {
    fn exact(value: Vec<Tensor>) -> Self {
        VjpOutcome {
            value,
            iterations: 0,
            warning: None,
        }
    }
}

impl BestResponseVjpRequest<'_> {
    fn validate(&self) -> Result<&[Tensor]> {
        let w = self.lower.params();
        if self.v.len() != w.len() || self.v.iter().zip(w).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::invalid(format!(
                "vector does not match the parameters of `{}`",
                self.lower.name()
            )));
        }
        self.lambda()
    }

    fn lambda(&self) -> Result<&[Tensor]> {
        self.collaborators
            .get(self.wrt)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "`{}` is not constrained by `{}`",
                    self.lower.name(),
                    self.wrt
                ))
            })
    }

    fn batch(&self) -> Result<&Batch> {
        self.lower.last_batch().ok_or_else(|| {
            Error::state(format!(
                "lower problem `{}` has no approximate solution yet",
                self.lower.name()
            ))
        })
    }

    /// Fresh leaves holding the lower's current parameters.
    fn w_hat(&self) -> Vec<Tensor> {
        self.lower
            .params()
            .iter()
            .map(|p| p.detach().requires_grad())
            .collect()
    }

    fn zeros(&self) -> Result<VjpOutcome> {
        Ok(VjpOutcome::exact(flat::zeros_like(self.lambda()?)))
    }

    fn lower_lr(&self) -> f64 {
        self.lower
            .config()
            .lr_at(self.lower.local_step().saturating_sub(1))
    }
}

/// Dispatch on the lower problem's configured algorithm.
pub fn best_response_vjp(req: &BestResponseVjpRequest<'_>) -> Result<VjpOutcome> {
    match req.lower.config().jacobian_algo {
        JacobianAlgo::ItdRmad => vjp_itd_rmad(req),
        JacobianAlgo::AidNeumann => vjp_aid_neumann(req),
        JacobianAlgo::AidCg => vjp_aid_cg(req),
        JacobianAlgo::AidFd => vjp_aid_fd(req),
    }
}

/// Backpropagate `v` from the final unrolled state to the constraining
/// parameters the unroll was recorded against.
pub fn vjp_itd_rmad(req: &BestResponseVjpRequest<'_>) -> Result<VjpOutcome> {
    req.validate()?;
    let trace = req
        .lower
        .itd_trace()
        .filter(|t| !t.is_empty())
        .ok_or_else(|| {
            Error::state(format!(
                "`{}` has no unrolled trace to differentiate",
                req.lower.name()
            ))
        })?;
    let lambda = trace.sources().get(req.wrt).ok_or_else(|| {
        Error::Lookup(format!(
            "unroll of `{}` did not read `{}`",
            req.lower.name(),
            req.wrt
        ))
    })?;
    let w_t = trace.states().last().expect("nonempty trace");
    let value = vjp(w_t, req.v, lambda, false)?;
    Ok(VjpOutcome::exact(value))
}

/// Truncated Neumann series for `H^-1 v`, then the mixed second derivative.
pub fn vjp_aid_neumann(req: &BestResponseVjpRequest<'_>) -> Result<VjpOutcome> {
    let lambda = req.validate()?;
    let batch = req.batch()?;
    let cfg = req.lower.config();
    let alpha = cfg.neumann_alpha();
    let w = req.w_hat();
    let cost = req.lower.evaluate(&w, req.collaborators, batch)?;
    let h = HessianOperator::new(&cost, &w)?;
    let mut p = flat::detach(req.v);
    let mut sum = p.clone();
    for j in 1..=cfg.neumann_iterations {
        let hp = h.apply(&p)?;
        p = flat::lincomb(1.0, &p, -alpha, &hp)?;
        if !flat::all_finite(&p) {
            return Err(Error::numerical(format!(
                "neumann iterate {j} is not finite (alpha {alpha} too large for the curvature)"
            )));
        }
        flat::axpy(1.0, &p, &mut sum)?;
    }
    let u = flat::scale(alpha, &sum);
    let cross = h.mixed(lambda, &u)?;
    Ok(VjpOutcome {
        value: flat::scale(-1.0, &cross),
        iterations: cfg.neumann_iterations,
        warning: None,
    })
}

/// Conjugate-gradient solve of `H u = v`, then the mixed second derivative.
pub fn vjp_aid_cg(req: &BestResponseVjpRequest<'_>) -> Result<VjpOutcome> {
    let lambda = req.validate()?;
    let v_norm = flat::norm(req.v);
    if v_norm == 0.0 {
        return req.zeros();
    }
    let batch = req.batch()?;
    let cfg = req.lower.config();
    let w = req.w_hat();
    let cost = req.lower.evaluate(&w, req.collaborators, batch)?;
    let h = HessianOperator::new(&cost, &w)?;

    let mut u = flat::zeros_like(req.v);
    let mut r = flat::detach(req.v);
    let mut p = r.clone();
    let mut rs = flat::dot(&r, &r)?;
    let mut iterations = 0;
    let mut warning = None;
    while iterations < cfg.cg_iterations && rs.sqrt() >= cfg.cg_tolerance * v_norm {
        let hp = h.apply(&p)?;
        let curvature = flat::dot(&p, &hp)?;
        if !curvature.is_finite() {
            return Err(Error::numerical(format!(
                "conjugate gradient curvature is not finite at iteration {iterations}"
            )));
        }
        if curvature <= 0.0 {
            warning = Some(format!(
                "non-positive curvature {curvature:e} in `{}` at iteration {iterations}; \
                 returning the last iterate",
                req.lower.name()
            ));
            break;
        }
        let step = rs / curvature;
        flat::axpy(step, &p, &mut u)?;
        flat::axpy(-step, &hp, &mut r)?;
        let rs_next = flat::dot(&r, &r)?;
        p = flat::lincomb(1.0, &r, rs_next / rs, &p)?;
        rs = rs_next;
        iterations += 1;
    }
    if !flat::all_finite(&u) {
        return Err(Error::numerical("conjugate gradient iterate is not finite"));
    }
    let cross = h.mixed(lambda, &u)?;
    Ok(VjpOutcome {
        value: flat::scale(-1.0, &cross),
        iterations,
        warning,
    })
}

/// Central difference of the constraining-parameter gradient around the
/// unrolled weights, approximating the one-step-unrolled product
/// `-lr * v^T d2C/(dw dlambda)`.
pub fn vjp_aid_fd(req: &BestResponseVjpRequest<'_>) -> Result<VjpOutcome> {
    let lambda = req.validate()?;
    let v_norm = flat::norm(req.v);
    if v_norm == 0.0 {
        return req.zeros();
    }
    let batch = req.batch()?;
    let eps = req.lower.config().fd_epsilon / v_norm;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::numerical(format!(
            "finite-difference step {eps:e} underflows for |v| = {v_norm:e}"
        )));
    }
    let w = flat::detach(req.lower.params());
    let side = |sign: f64| -> Result<Vec<Tensor>> {
        let shifted = flat::lincomb(1.0, &w, sign * eps, req.v)?;
        let cost = req.lower.evaluate(&shifted, req.collaborators, batch)?;
        grad(&cost, lambda, false)
    };
    let plus = side(1.0)?;
    let minus = side(-1.0)?;
    let coeff = -req.lower_lr() / (2.0 * eps);
    Ok(VjpOutcome::exact(flat::lincomb(
        coeff, &plus, -coeff, &minus,
    )?))
}
