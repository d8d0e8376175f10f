//! A single optimization level.
//!
//! A [`Problem`] owns its parameters, data stream, cost callback, optimizer
//! and configuration. Its constraining problem sets are injected once by the
//! engine. A step is split into four sub-steps that the engine drives:
//! batch loading ([`Problem::next_batch`]), cost evaluation
//! ([`Problem::evaluate`]), gradient calculation (engine side) and the
//! parameter update ([`Problem::apply_update`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    sgd_step_functional, MomentumState, Optimizer, OptimizerHyper, OptimizerKind, Tensor,
};

/// Best-response Jacobian algorithm used for edges into a problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianAlgo {
    ItdRmad,
    AidNeumann,
    AidCg,
    AidFd,
}

impl JacobianAlgo {
    pub const ALL: [JacobianAlgo; 4] = [
        JacobianAlgo::ItdRmad,
        JacobianAlgo::AidNeumann,
        JacobianAlgo::AidCg,
        JacobianAlgo::AidFd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JacobianAlgo::ItdRmad => "itd_rmad",
            JacobianAlgo::AidNeumann => "aid_neumann",
            JacobianAlgo::AidCg => "aid_cg",
            JacobianAlgo::AidFd => "aid_fd",
        }
    }
}

impl fmt::Display for JacobianAlgo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-problem optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemConfig {
    pub jacobian_algo: JacobianAlgo,
    /// Gradient steps per unroll approximating the problem's optimum.
    pub unroll_steps: usize,
    pub neumann_iterations: usize,
    /// Defaults to the learning rate when unset.
    pub neumann_alpha: Option<f64>,
    pub cg_iterations: usize,
    pub cg_tolerance: f64,
    pub fd_epsilon: f64,
    /// Drop every path contribution from this problem's hypergradient.
    pub first_order: bool,
    /// Keep an unrolled trace alive for more than one consumer.
    pub retain_graph: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Local steps at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_steps: Vec<usize>,
    pub lr_decay_factor: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig {
            jacobian_algo: JacobianAlgo::AidCg,
            unroll_steps: 1,
            neumann_iterations: 3,
            neumann_alpha: None,
            cg_iterations: 32,
            cg_tolerance: 1e-10,
            fd_epsilon: 0.01,
            first_order: false,
            retain_graph: false,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.0,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            lr_decay_steps: Vec::new(),
            lr_decay_factor: 0.1,
        }
    }
}

impl ProblemConfig {
    pub fn with_algo(mut self, algo: JacobianAlgo) -> Self {
        self.jacobian_algo = algo;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive, got {v}")))
            }
        };
        if self.unroll_steps == 0 {
            return Err(Error::invalid("unroll_steps must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.optimizer == OptimizerKind::Adam {
            for b in self.adam_betas {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::invalid(format!("adam beta {b} outside [0, 1)")));
                }
            }
            positive(self.adam_eps, "adam_eps")?;
        }
        match self.jacobian_algo {
            JacobianAlgo::ItdRmad => {
                if self.optimizer != OptimizerKind::Sgd {
                    return Err(Error::invalid(
                        "itd_rmad differentiates through the optimizer and requires sgd",
                    ));
                }
            }
            JacobianAlgo::AidNeumann => {
                if self.neumann_iterations == 0 {
                    return Err(Error::invalid("neumann_iterations must be at least 1"));
                }
                positive(self.neumann_alpha(), "neumann_alpha")?;
            }
            JacobianAlgo::AidCg => {
                if self.cg_iterations == 0 {
                    return Err(Error::invalid("cg_iterations must be at least 1"));
                }
                positive(self.cg_tolerance, "cg_tolerance")?;
            }
            JacobianAlgo::AidFd => positive(self.fd_epsilon, "fd_epsilon")?,
        }
        Ok(())
    }

    pub fn neumann_alpha(&self) -> f64 {
        self.neumann_alpha.unwrap_or(self.lr)
    }

    /// Step-decayed learning rate at a local step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let decays = self.lr_decay_steps.iter().filter(|&&s| step >= s).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn is_itd(&self) -> bool {
        self.jacobian_algo == JacobianAlgo::ItdRmad
    }

    fn hyper(&self) -> OptimizerHyper {
        OptimizerHyper {
            lr: self.lr,
            momentum: self.momentum,
            beta1: self.adam_betas[0],
            beta2: self.adam_betas[1],
            eps: self.adam_eps,
        }
    }
}

/// One minibatch of a problem's data.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor,
    pub targets: Tensor,
    /// Dataset row of each sample, for per-sample bookkeeping.
    pub sample_indices: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, targets: Tensor, sample_indices: Vec<usize>) -> Result<Self> {
        let lead = |t: &Tensor| t.shape().first().copied();
        if let (Some(a), Some(b)) = (lead(&inputs), lead(&targets)) {
            if a != b {
                return Err(Error::invalid(format!(
                    "batch inputs have {a} rows but targets {b}"
                )));
            }
            if !sample_indices.is_empty() && sample_indices.len() != a {
                return Err(Error::invalid(format!(
                    "{} sample indices for {a} rows",
                    sample_indices.len()
                )));
            }
        }
        Ok(Batch {
            inputs,
            targets,
            sample_indices,
        })
    }

    /// Placeholder batch for costs that do not read data.
    pub fn unit() -> Self {
        Batch {
            inputs: Tensor::scalar(0.0),
            targets: Tensor::scalar(0.0),
            sample_indices: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.shape().first().copied().unwrap_or(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Source of batches for a problem.
pub trait DataStream: Send {
    fn next_batch(&mut self) -> Batch;
}

impl<F> DataStream for F
where
    F: FnMut() -> Batch + Send,
{
    fn next_batch(&mut self) -> Batch {
        self()
    }
}

/// Yields the same batch forever.
#[derive(Debug, Clone)]
pub struct FixedStream(pub Batch);

impl DataStream for FixedStream {
    fn next_batch(&mut self) -> Batch {
        self.0.clone()
    }
}

/// Cycles through a dataset in minibatches, reshuffling at each epoch from
/// a seeded generator.
pub struct ShuffledStream {
    inputs: Tensor,
    targets: Tensor,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl ShuffledStream {
    /// `inputs` and `targets` are rank-2 with one row per sample.
    pub fn new(inputs: Tensor, targets: Tensor, batch_size: usize, seed: u64) -> Result<Self> {
        if inputs.rank() != 2 || targets.rank() != 2 || inputs.shape()[0] != targets.shape()[0] {
            return Err(Error::invalid(format!(
                "dataset inputs {:?} and targets {:?} must be rank 2 with equal rows",
                inputs.shape(),
                targets.shape()
            )));
        }
        if batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        let n = inputs.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Ok(ShuffledStream {
            inputs: inputs.detach(),
            targets: targets.detach(),
            batch_size: batch_size.min(n),
            rng,
            order,
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Select rows of a rank-2 tensor.
pub fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::invalid("gather_rows needs rank 2"));
    }
    let cols = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * cols);
    for &r in rows {
        if r >= t.shape()[0] {
            return Err(Error::invalid(format!("row {r} out of range")));
        }
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(&[rows.len(), cols], data)
}

impl DataStream for ShuffledStream {
    fn next_batch(&mut self) -> Batch {
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let idx = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        let inputs = gather_rows(&self.inputs, &idx).expect("validated dataset");
        let targets = gather_rows(&self.targets, &idx).expect("validated dataset");
        Batch {
            inputs,
            targets,
            sample_indices: idx,
        }
    }
}

/// Read-only view handed to a cost callback.
pub struct CostContext<'a> {
    name: &'a str,
    params: &'a [Tensor],
    collaborators: &'a BTreeMap<String, Vec<Tensor>>,
}

impl<'a> CostContext<'a> {
    pub fn new(
        name: &'a str,
        params: &'a [Tensor],
        collaborators: &'a BTreeMap<String, Vec<Tensor>>,
    ) -> Self {
        CostContext {
            name,
            params,
            collaborators,
        }
    }

    pub fn name(&self) -> &str {
        self.name
    }

    /// This problem's parameters.
    pub fn params(&self) -> &'a [Tensor] {
        self.params
    }

    /// Parameters of a constraining problem: the current (non-optimal)
    /// parameters of an upper problem, or the approximate optimum of a lower one.
    pub fn collaborator(&self, name: &str) -> Result<&'a [Tensor]> {
        self.collaborators
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Lookup(format!(
                    "problem `{}` has no constraining problem named `{name}`",
                    self.name
                ))
            })
    }
}

pub type CostFn = Box<dyn Fn(&CostContext<'_>, &Batch) -> Result<Tensor> + Send>;

/// Parameter states recorded during the current unroll of an ITD problem.
#[derive(Debug, Clone, Default)]
pub struct ItdTrace {
    states: Vec<Vec<Tensor>>,
    sources: BTreeMap<String, Vec<Tensor>>,
    /// Set once a collaborator changed mid-unroll, so the warning fires once.
    stale_sources: bool,
}

impl ItdTrace {
    /// Post-step parameter states, oldest first.
    pub fn states(&self) -> &[Vec<Tensor>] {
        &self.states
    }

    /// Constraining-problem tensors the unroll was recorded against.
    pub fn sources(&self) -> &BTreeMap<String, Vec<Tensor>> {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

pub struct Problem {
    name: String,
    params: Vec<Tensor>,
    optimizer: Optimizer,
    momentum: MomentumState,
    stream: Box<dyn DataStream>,
    cost_fn: CostFn,
    config: ProblemConfig,
    reads: Option<BTreeSet<String>>,
    uppers: Option<BTreeSet<String>>,
    lowers: Option<BTreeSet<String>>,
    child_call_counters: BTreeMap<String, usize>,
    local_step: usize,
    itd_trace: Option<ItdTrace>,
    last_batch: Option<Batch>,
    version: u64,
    view: Option<(u64, Vec<Tensor>)>,
    loss_trace: Vec<f64>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("params", &self.params.len())
            .field("config", &self.config)
            .field("uppers", &self.uppers)
            .field("lowers", &self.lowers)
            .field("local_step", &self.local_step)
            .finish()
    }
}

impl Problem {
    pub fn new(
        name: impl Into<String>,
        params: Vec<Tensor>,
        stream: impl DataStream + 'static,
        cost_fn: impl Fn(&CostContext<'_>, &Batch) -> Result<Tensor> + Send + 'static,
        config: ProblemConfig,
    ) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::invalid("problem name must be nonempty"));
        }
        if params.is_empty() {
            return Err(Error::invalid(format!(
                "problem `{name}` has no parameters"
            )));
        }
        config.validate()?;
        let params: Vec<Tensor> = params
            .into_iter()
            .map(|p| {
                if p.is_leaf() {
                    p
                } else {
                    p.detach().requires_grad()
                }
            })
            .collect();
        let mut optimizer = Optimizer::new(config.optimizer, config.hyper());
        optimizer.init(&params);
        Ok(Problem {
            momentum: MomentumState::zeros_like(&params),
            name,
            params,
            optimizer,
            stream: Box::new(stream),
            cost_fn: Box::new(cost_fn),
            config,
            reads: None,
            uppers: None,
            lowers: None,
            child_call_counters: BTreeMap::new(),
            local_step: 0,
            itd_trace: None,
            last_batch: None,
            version: 0,
            view: None,
            loss_trace: Vec::new(),
        })
    }

    /// Declare which constraining problems the cost callback reads.
    /// Without a declaration every graph neighbour is assumed to be read.
    pub fn with_reads<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.reads = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn config(&self) -> &ProblemConfig {
        &self.config
    }

    pub fn reads(&self) -> Option<&BTreeSet<String>> {
        self.reads.as_ref()
    }

    pub fn local_step(&self) -> usize {
        self.local_step
    }

    pub fn loss_trace(&self) -> &[f64] {
        &self.loss_trace
    }

    pub fn last_batch(&self) -> Option<&Batch> {
        self.last_batch.as_ref()
    }

    pub fn itd_trace(&self) -> Option<&ItdTrace> {
        self.itd_trace.as_ref()
    }

    pub fn uppers(&self) -> Option<&BTreeSet<String>> {
        self.uppers.as_ref()
    }

    pub fn lowers(&self) -> Option<&BTreeSet<String>> {
        self.lowers.as_ref()
    }

    pub fn is_injected(&self) -> bool {
        self.uppers.is_some()
    }

    pub fn child_call_counters(&self) -> &BTreeMap<String, usize> {
        &self.child_call_counters
    }

    pub(crate) fn child_call_counters_mut(&mut self) -> &mut BTreeMap<String, usize> {
        &mut self.child_call_counters
    }

    /// Number of completed unrolls so far.
    pub fn completed_unrolls(&self) -> usize {
        self.local_step / self.config.unroll_steps
    }

    /// Fix the constraining sets. Allowed exactly once.
    pub fn inject_dependencies(
        &mut self,
        uppers: BTreeSet<String>,
        lowers: BTreeSet<String>,
    ) -> Result<()> {
        if self.is_injected() {
            return Err(Error::state(format!(
                "dependencies of `{}` already injected",
                self.name
            )));
        }
        if uppers.contains(&self.name) || lowers.contains(&self.name) {
            return Err(Error::invalid(format!(
                "problem `{}` cannot constrain itself",
                self.name
            )));
        }
        self.child_call_counters = lowers.iter().map(|l| (l.clone(), 0)).collect();
        self.uppers = Some(uppers);
        self.lowers = Some(lowers);
        Ok(())
    }

    /// Deep copies of the parameters, detached from any graph.
    pub fn snapshot_params(&self) -> Vec<Tensor> {
        self.params.iter().map(Tensor::deep_copy).collect()
    }

    /// Replace parameter values (for example to reset a model between runs).
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len()
            || values
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("replacement parameters differ in shape"));
        }
        self.params = values
            .iter()
            .map(|v| v.deep_copy().requires_grad())
            .collect();
        self.momentum = MomentumState::zeros_like(&self.params);
        self.itd_trace = None;
        self.bump();
        Ok(())
    }

    fn bump(&mut self) {
        self.version += 1;
        self.view = None;
    }

    /// Detached leaf copy of the current parameters, cached until they change.
    /// Upper problems see a lower problem's approximate optimum through this view.
    pub fn optimal_view(&mut self) -> Vec<Tensor> {
        match &self.view {
            Some((v, t)) if *v == self.version => t.clone(),
            _ => {
                let t: Vec<Tensor> = self
                    .params
                    .iter()
                    .map(|p| p.detach().requires_grad())
                    .collect();
                self.view = Some((self.version, t.clone()));
                t
            }
        }
    }

    /// Prepare for a step. An ITD problem starting a new unroll cuts its
    /// parameters from the previous graph and opens a fresh trace.
    pub fn begin_step(&mut self) -> Result<()> {
        if !self.is_injected() {
            return Err(Error::state(format!(
                "problem `{}` stepped before dependency injection",
                self.name
            )));
        }
        if self.config.is_itd() && self.local_step.is_multiple_of(self.config.unroll_steps) {
            self.params = self
                .params
                .iter()
                .map(|p| p.detach().requires_grad())
                .collect();
            self.momentum = self.momentum.detached();
            self.itd_trace = Some(ItdTrace::default());
        }
        Ok(())
    }

    pub fn next_batch(&mut self) -> Batch {
        self.stream.next_batch()
    }

    /// Evaluate the cost at `params` (normally the problem's own).
    pub fn evaluate(
        &self,
        params: &[Tensor],
        collaborators: &BTreeMap<String, Vec<Tensor>>,
        batch: &Batch,
    ) -> Result<Tensor> {
        let ctx = CostContext::new(&self.name, params, collaborators);
        let cost = (self.cost_fn)(&ctx, batch)?;
        if cost.numel() != 1 {
            return Err(Error::invalid(format!(
                "cost of `{}` has shape {:?}, expected a scalar",
                self.name,
                cost.shape()
            )));
        }
        if !cost.data()[0].is_finite() {
            return Err(Error::Numerical {
                problem: Some(self.name.clone()),
                message: format!("non-finite cost {}", cost.data()[0]),
            });
        }
        Ok(cost)
    }

    pub(crate) fn record_loss(&mut self, value: f64) {
        self.loss_trace.push(value);
    }

    /// Apply the computed gradient and advance the local step counter.
    /// Returns `true` when this step completed an unroll.
    pub fn apply_update(
        &mut self,
        grads: &[Tensor],
        batch: Batch,
        collaborators: &BTreeMap<String, Vec<Tensor>>,
    ) -> Result<bool> {
        if !flat_finite(grads) {
            return Err(Error::Numerical {
                problem: Some(self.name.clone()),
                message: "non-finite gradient".into(),
            });
        }
        let lr = self.config.lr_at(self.local_step);
        if self.config.is_itd() {
            let (next, momentum) = sgd_step_functional(
                &self.params,
                grads,
                lr,
                self.config.momentum,
                &self.momentum,
            )?;
            self.params = next;
            self.momentum = momentum;
            let trace = self.itd_trace.get_or_insert_with(ItdTrace::default);
            if trace.states.is_empty() {
                trace.sources = collaborators.clone();
            } else if !trace.stale_sources
                && trace.sources.iter().any(|(k, v)| {
                    collaborators
                        .get(k)
                        .is_none_or(|c| c.iter().zip(v).any(|(a, b)| a.node_id() != b.node_id()))
                })
            {
                trace.stale_sources = true;
                log::warn!(
                    "constraining parameters of `{}` changed during an unroll; \
                     the unrolled Jacobian only covers the first state",
                    self.name
                );
            }
            trace.states.push(self.params.clone());
        } else {
            self.optimizer.set_lr(lr);
            self.optimizer.apply(&mut self.params, grads)?;
        }
        self.bump();
        self.last_batch = Some(batch);
        self.local_step += 1;
        Ok(self.local_step.is_multiple_of(self.config.unroll_steps))
    }

    /// Free the unrolled graph: parameters become fresh leaves with the same values.
    pub fn release_trace(&mut self) {
        if self.itd_trace.take().is_some() {
            self.params = self
                .params
                .iter()
                .map(|p| p.detach().requires_grad())
                .collect();
            self.momentum = self.momentum.detached();
        }
    }
}

fn flat_finite(t: &[Tensor]) -> bool {
    crate::tensor::flat::all_finite(t)
}
