//! Scheduling and hypergradient evaluation over a dependency graph.
//!
//! The engine drives the lowermost problems (those no other problem must
//! finish before) in registration order. After each completed unroll a problem
//! calls every problem it feeds through an `l2u` edge; a problem with several
//! lowers steps once all of them have called since its last step.
//!
//! The gradient of problem `k` is its direct gradient plus, for every lower
//! `l` it reads and every compiled path `k -> q1 -> ... -> l`, the vector
//! `dC_k/dtheta_l` pushed right-to-left through the best-response products
//! along the path. Only parameter-sized vectors are materialized.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{compile_paths, CompiledPaths, DependencyGraph, Path};
use crate::jacobian::{best_response_vjp, BestResponseVjpRequest};
use crate::problem::{Batch, Problem};
use crate::tensor::{flat, grad, Tensor};

/// Per-run summary returned by [`Engine::run`].
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunReport {
    /// Cost of every step, per problem.
    pub loss_traces: BTreeMap<String, Vec<f64>>,
    pub steps: BTreeMap<String, usize>,
    /// Completed unrolls reported upward, per problem.
    pub notifications: BTreeMap<String, usize>,
    /// Total solver iterations spent in best-response products, per lower problem.
    pub solver_iterations: BTreeMap<String, usize>,
    /// Distinct warnings with occurrence counts.
    pub warnings: BTreeMap<String, usize>,
}

pub struct Engine {
    problems: Vec<Problem>,
    index: BTreeMap<String, usize>,
    graph: DependencyGraph,
    paths: CompiledPaths,
    /// Lowers whose optima enter each problem's gradient.
    targets: Vec<BTreeSet<String>>,
    callees: Vec<Vec<usize>>,
    lowermost: Vec<usize>,
    /// Problems whose gradient replays each problem's unroll.
    trace_consumers: Vec<BTreeSet<usize>>,
    consumed: Vec<BTreeSet<usize>>,
    notifications: Vec<usize>,
    solver_iterations: Vec<usize>,
    warnings: BTreeMap<String, usize>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("problems", &self.index.keys().collect::<Vec<_>>())
            .field("graph", &self.graph)
            .finish()
    }
}

impl Engine {
    /// Validate the graph, compile paths and inject constraining sets.
    pub fn new(mut problems: Vec<Problem>, graph: DependencyGraph) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, p) in problems.iter().enumerate() {
            if index.insert(p.name().to_string(), i).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate problem name `{}`",
                    p.name()
                )));
            }
        }
        let names: BTreeSet<String> = index.keys().cloned().collect();
        graph.validate(&names)?;
        let paths = compile_paths(&graph, &names);

        let n = problems.len();
        let mut targets = vec![BTreeSet::new(); n];
        let mut trace_consumers = vec![BTreeSet::new(); n];
        let mut warnings = BTreeMap::new();
        for (k, problem) in problems.iter_mut().enumerate() {
            let name = problem.name().to_string();
            let uppers = graph.uppers_of(&name);
            let lowers = graph.lowers_of(&name);
            if let Some(reads) = problem.reads() {
                if let Some(bad) = reads
                    .iter()
                    .find(|r| !uppers.contains(*r) && !lowers.contains(*r))
                {
                    return Err(Error::Lookup(format!(
                        "`{name}` declares a read of `{bad}`, which does not constrain it"
                    )));
                }
            }
            for (l, q) in paths.for_problem(&name) {
                if q.is_empty() {
                    continue;
                }
                if problem.reads().is_some_and(|r| !r.contains(l)) {
                    let msg = format!("`{name}` does not read `{l}`; its paths are pruned");
                    log::warn!("{msg}");
                    warnings.insert(msg, 1);
                    continue;
                }
                targets[k].insert(l.to_string());
                for path in q {
                    for node in &path.nodes()[1..] {
                        trace_consumers[index[node]].insert(k);
                    }
                }
            }
            problem.inject_dependencies(uppers, lowers)?;
        }
        let callees = problems
            .iter()
            .map(|p| {
                graph
                    .callees_of(p.name())
                    .iter()
                    .map(|c| index[c])
                    .collect()
            })
            .collect();
        let lowermost = problems
            .iter()
            .enumerate()
            .filter(|(_, p)| p.lowers().is_some_and(BTreeSet::is_empty))
            .map(|(i, _)| i)
            .collect();
        Ok(Engine {
            problems,
            index,
            graph,
            paths,
            targets,
            callees,
            lowermost,
            trace_consumers,
            consumed: vec![BTreeSet::new(); n],
            notifications: vec![0; n],
            solver_iterations: vec![0; n],
            warnings,
        })
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("no problem named `{name}`")))
    }

    pub fn problem(&self, name: &str) -> Result<&Problem> {
        Ok(&self.problems[self.idx(name)?])
    }

    pub fn problem_mut(&mut self, name: &str) -> Result<&mut Problem> {
        let i = self.idx(name)?;
        Ok(&mut self.problems[i])
    }

    pub fn problems(&self) -> &[Problem] {
        &self.problems
    }

    pub fn params(&self, name: &str) -> Result<&[Tensor]> {
        Ok(self.problem(name)?.params())
    }

    pub fn graph(&self) -> &DependencyGraph {
        &self.graph
    }

    pub fn paths(&self) -> &CompiledPaths {
        &self.paths
    }

    /// Lowers whose optima enter the gradient of `name`.
    pub fn gradient_targets(&self, name: &str) -> Result<&BTreeSet<String>> {
        Ok(&self.targets[self.idx(name)?])
    }

    /// Problems driven directly by [`Engine::run`].
    pub fn lowermost(&self) -> Vec<&str> {
        self.lowermost
            .iter()
            .map(|&i| self.problems[i].name())
            .collect()
    }

    pub fn notifications(&self, name: &str) -> Result<usize> {
        Ok(self.notifications[self.idx(name)?])
    }

    pub fn warnings(&self) -> &BTreeMap<String, usize> {
        &self.warnings
    }

    fn warn(&mut self, msg: String) {
        *self.warnings.entry(msg).or_default() += 1;
    }

    /// Tensors the cost of problem `k` sees for each constraining problem:
    /// live parameters of uppers, cached optimum views of lowers.
    fn collaborators(&mut self, k: usize) -> BTreeMap<String, Vec<Tensor>> {
        let problem = &self.problems[k];
        let uppers: Vec<String> = problem.uppers().into_iter().flatten().cloned().collect();
        let lowers: Vec<String> = problem.lowers().into_iter().flatten().cloned().collect();
        let mut out = BTreeMap::new();
        for u in uppers {
            let params = self.problems[self.index[&u]].params().to_vec();
            out.insert(u, params);
        }
        for l in lowers {
            let i = self.index[&l];
            out.insert(l, self.problems[i].optimal_view());
        }
        out
    }

    /// Hypergradient of problem `k` for an already evaluated cost.
    fn gradient(
        &mut self,
        k: usize,
        cost: &Tensor,
        collab: &BTreeMap<String, Vec<Tensor>>,
        consume: bool,
    ) -> Result<Vec<Tensor>> {
        let problem = &self.problems[k];
        let own = problem.params().to_vec();
        let create_graph = problem.config().is_itd();
        let first_order = problem.config().first_order;
        let targets: Vec<String> = self.targets[k].iter().cloned().collect();

        let mut wrt = own.clone();
        let mut spans = Vec::with_capacity(targets.len());
        for l in &targets {
            let t = collab
                .get(l)
                .ok_or_else(|| Error::InternalConsistency(format!("no view of `{l}`")))?;
            spans.push((wrt.len(), wrt.len() + t.len()));
            wrt.extend(t.iter().cloned());
        }
        let mut grads = grad(cost, &wrt, create_graph)?;
        let lower_grads = grads.split_off(own.len());
        let direct = grads;
        if targets.is_empty() || first_order {
            return Ok(direct);
        }

        let name = self.problems[k].name().to_string();
        let mut total = flat::zeros_like(&own);
        for (l, (lo, hi)) in targets.iter().zip(spans) {
            let seed = flat::detach(&lower_grads[lo - own.len()..hi - own.len()]);
            let paths: Vec<Path> = self.paths.get(&name, l).to_vec();
            for path in paths {
                let contribution = self.push_along(&path, seed.clone(), consume, k)?;
                flat::axpy(1.0, &contribution, &mut total)?;
            }
        }
        if create_graph {
            direct.iter().zip(&total).map(|(d, t)| d.add(t)).collect()
        } else {
            flat::lincomb(1.0, &flat::detach(&direct), 1.0, &total)
        }
    }

    /// Right-to-left product along one path, starting from `dC_k/dtheta_l`.
    fn push_along(
        &mut self,
        path: &Path,
        mut v: Vec<Tensor>,
        consume: bool,
        k: usize,
    ) -> Result<Vec<Tensor>> {
        let nodes = path.nodes();
        for j in (0..nodes.len() - 1).rev() {
            let lower = self.index[&nodes[j + 1]];
            let collab = self.collaborators(lower);
            let outcome = best_response_vjp(&BestResponseVjpRequest {
                lower: &self.problems[lower],
                collaborators: &collab,
                wrt: &nodes[j],
                v: &v,
            })
            .map_err(|e| e.in_problem(&nodes[j + 1]))?;
            self.solver_iterations[lower] += outcome.iterations;
            if let Some(w) = outcome.warning {
                log::warn!("{w}");
                self.warn(format!(
                    "conjugate gradient hit non-positive curvature in `{}`",
                    nodes[j + 1]
                ));
            }
            if !flat::all_finite(&outcome.value) {
                return Err(Error::Numerical {
                    problem: Some(nodes[j + 1].clone()),
                    message: "non-finite best-response product".into(),
                });
            }
            if consume {
                self.mark_consumed(lower, k);
            }
            v = outcome.value;
        }
        Ok(v)
    }

    fn mark_consumed(&mut self, lower: usize, by: usize) {
        let p = &self.problems[lower];
        if p.itd_trace().is_none() {
            return;
        }
        self.consumed[lower].insert(by);
        let done = !p.config().retain_graph
            || self.consumed[lower].is_superset(&self.trace_consumers[lower]);
        if done {
            self.problems[lower].release_trace();
            self.consumed[lower].clear();
        }
    }

    /// Hypergradient of `name` at the current state, without stepping or
    /// releasing any unrolled trace. Uses the problem's latest batch, or draws
    /// one if it has never stepped.
    pub fn compute_hypergradient(&mut self, name: &str) -> Result<Vec<Tensor>> {
        let k = self.idx(name)?;
        let batch = match self.problems[k].last_batch() {
            Some(b) => b.clone(),
            None => self.problems[k].next_batch(),
        };
        self.hypergradient_on(k, &batch)
            .map_err(|e| e.in_problem(name))
    }

    fn hypergradient_on(&mut self, k: usize, batch: &Batch) -> Result<Vec<Tensor>> {
        let collab = self.collaborators(k);
        let p = &self.problems[k];
        let cost = p.evaluate(p.params(), &collab, batch)?;
        let g = self.gradient(k, &cost, &collab, false)?;
        Ok(flat::detach(&g))
    }

    fn step_inner(&mut self, k: usize) -> Result<bool> {
        self.problems[k].begin_step()?;
        let batch = self.problems[k].next_batch();
        let collab = self.collaborators(k);
        let p = &self.problems[k];
        let cost = p.evaluate(p.params(), &collab, &batch)?;
        let value = cost.item()?;
        self.problems[k].record_loss(value);
        let g = self.gradient(k, &cost, &collab, true)?;
        let done = self.problems[k].apply_update(&g, batch, &collab)?;
        if done && self.trace_consumers[k].is_empty() {
            self.problems[k].release_trace();
        }
        Ok(done)
    }

    /// One step of problem `name`, followed by any calls it triggers.
    pub fn step(&mut self, name: &str) -> Result<()> {
        let k = self.idx(name)?;
        self.step_index(k)
    }

    fn step_index(&mut self, k: usize) -> Result<()> {
        let name = self.problems[k].name().to_string();
        let done = self.step_inner(k).map_err(|e| e.in_problem(&name))?;
        if done {
            self.notifications[k] += 1;
            for callee in self.callees[k].clone() {
                let to = self.problems[callee].name().to_string();
                self.notify(&name, &to)?;
            }
        }
        Ok(())
    }

    /// Record that `from` completed an unroll; step `to` once every lower
    /// of `to` has called since its last step.
    pub fn notify(&mut self, from: &str, to: &str) -> Result<()> {
        if !self.graph.has_l2u(from, to) {
            return Err(Error::InternalConsistency(format!(
                "notification {from} -> {to} does not follow an l2u edge"
            )));
        }
        let t = self.idx(to)?;
        let counters = self.problems[t].child_call_counters_mut();
        *counters.get_mut(from).ok_or_else(|| {
            Error::InternalConsistency(format!("`{to}` has no counter for `{from}`"))
        })? += 1;
        if counters.values().all(|&c| c > 0) {
            counters.values_mut().for_each(|c| *c -= 1);
            self.step_index(t)?;
        }
        Ok(())
    }

    /// Step every lowermost problem `global_iterations` times.
    pub fn run(&mut self, global_iterations: usize) -> Result<RunReport> {
        for _ in 0..global_iterations {
            for i in 0..self.lowermost.len() {
                self.step_index(self.lowermost[i])?;
            }
        }
        Ok(self.report())
    }

    pub fn report(&self) -> RunReport {
        let by_name = |f: &dyn Fn(usize) -> usize| {
            self.problems
                .iter()
                .enumerate()
                .map(|(i, p)| (p.name().to_string(), f(i)))
                .collect()
        };
        RunReport {
            loss_traces: self
                .problems
                .iter()
                .map(|p| (p.name().to_string(), p.loss_trace().to_vec()))
                .collect(),
            steps: by_name(&|i| self.problems[i].local_step()),
            notifications: by_name(&|i| self.notifications[i]),
            solver_iterations: by_name(&|i| self.solver_iterations[i]),
            warnings: self.warnings.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{CostContext, FixedStream, JacobianAlgo, ProblemConfig};
    use std::sync::{Arc, Mutex};

    fn scalar(name: &str, init: f64, cfg: ProblemConfig) -> Problem {
        Problem::new(
            name,
            vec![Tensor::vector(&[init])],
            FixedStream(Batch::unit()),
            |ctx: &CostContext<'_>, _: &Batch| Ok(ctx.params()[0].sqnorm()),
            cfg,
        )
        .unwrap()
    }

    /// Lower: 1/2 w^T diag(2, 4) w - lam^T w. Upper: 1/2 |w* - (1, 1)|^2.
    fn bilevel(lower_cfg: ProblemConfig, upper_cfg: ProblemConfig) -> Engine {
        let lower = Problem::new(
            "lower",
            vec![Tensor::vector(&[0.0, 0.0])],
            FixedStream(Batch::unit()),
            |ctx: &CostContext<'_>, _: &Batch| {
                let w = &ctx.params()[0];
                let lam = &ctx.collaborator("upper")?[0];
                w.mul(&Tensor::vector(&[2.0, 4.0]))?
                    .dot(w)?
                    .scale(0.5)
                    .sub(&lam.dot(w)?)
            },
            lower_cfg,
        )
        .unwrap();
        let upper = Problem::new(
            "upper",
            vec![Tensor::vector(&[4.0, 8.0])],
            FixedStream(Batch::unit()),
            |ctx: &CostContext<'_>, _: &Batch| {
                let w = &ctx.collaborator("lower")?[0];
                Ok(w.sub(&Tensor::vector(&[1.0, 1.0]))?.sqnorm().scale(0.5))
            },
            upper_cfg,
        )
        .unwrap();
        let graph = DependencyGraph::new()
            .with_u2l("upper", &["lower"])
            .with_l2u("lower", &["upper"]);
        Engine::new(vec![lower, upper], graph).unwrap()
    }

    fn lower_cfg(algo: JacobianAlgo, unroll: usize) -> ProblemConfig {
        ProblemConfig {
            lr: 0.1,
            unroll_steps: unroll,
            ..Default::default()
        }
        .with_algo(algo)
    }

    fn frozen() -> ProblemConfig {
        ProblemConfig {
            lr: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn bilevel_sets_injected() {
        let e = bilevel(lower_cfg(JacobianAlgo::AidCg, 1), frozen());
        let names = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(
            e.problem("lower").unwrap().uppers().unwrap(),
            &names(&["upper"])
        );
        assert!(e.problem("lower").unwrap().lowers().unwrap().is_empty());
        assert_eq!(
            e.problem("upper").unwrap().lowers().unwrap(),
            &names(&["lower"])
        );
        assert!(e.problem("upper").unwrap().uppers().unwrap().is_empty());
        assert_eq!(e.lowermost(), vec!["lower"]);
    }

    #[test]
    fn bilevel_quadratic_oracle_cg() {
        let mut e = bilevel(lower_cfg(JacobianAlgo::AidCg, 200), frozen());
        e.run(200).unwrap();
        let w = e.params("lower").unwrap()[0].to_vec();
        assert!((w[0] - 2.0).abs() < 1e-12 && (w[1] - 2.0).abs() < 1e-12);
        let g = e.compute_hypergradient("upper").unwrap();
        assert!((g[0].data()[0] - 0.5).abs() < 1e-6);
        assert!((g[0].data()[1] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn bilevel_quadratic_oracle_itd() {
        let mut e = bilevel(lower_cfg(JacobianAlgo::ItdRmad, 500), frozen());
        e.run(499).unwrap();
        assert_eq!(e.problem("lower").unwrap().itd_trace().unwrap().len(), 499);
        let g = e.compute_hypergradient("upper").unwrap();
        assert!((g[0].data()[0] - 0.5).abs() / 0.5 < 1e-3);
        assert!((g[0].data()[1] - 0.25).abs() / 0.25 < 1e-3);
        // the upper step at the end of the unroll consumes and frees the trace
        e.run(1).unwrap();
        assert!(e.problem("lower").unwrap().itd_trace().is_none());
        assert_eq!(e.problem("upper").unwrap().local_step(), 1);
    }

    #[test]
    fn lone_problem_gradient_is_direct() {
        let mut e = Engine::new(
            vec![scalar("solo", 3.0, ProblemConfig::default())],
            DependencyGraph::new(),
        )
        .unwrap();
        let g = e.compute_hypergradient("solo").unwrap();
        assert_eq!(g[0].data()[0].to_bits(), 6.0f64.to_bits());
        let report = e.run(10).unwrap();
        assert_eq!(report.loss_traces["solo"].len(), 10);
        assert!(report.loss_traces["solo"].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn first_order_drops_paths() {
        let upper_cfg = ProblemConfig {
            first_order: true,
            ..frozen()
        };
        let mut e = bilevel(lower_cfg(JacobianAlgo::AidCg, 10), upper_cfg);
        e.run(10).unwrap();
        let g = e.compute_hypergradient("upper").unwrap();
        // upper cost has no direct dependence on its own parameters
        assert_eq!(g[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn upper_steps_once_per_unroll() {
        let mut e = bilevel(lower_cfg(JacobianAlgo::AidCg, 5), frozen());
        let report = e.run(100).unwrap();
        assert_eq!(report.steps["lower"], 100);
        assert_eq!(report.steps["upper"], 20);
        assert_eq!(report.notifications["lower"], 20);
    }

    #[test]
    fn two_lowers_both_must_call() {
        let a = ProblemConfig {
            unroll_steps: 2,
            ..Default::default()
        };
        let cost = |ctx: &CostContext<'_>, _: &Batch| {
            ctx.params()[0]
                .sqnorm()
                .add(&ctx.collaborator("a")?[0].sum())?
                .add(&ctx.collaborator("b")?[0].sum())
        };
        let top = Problem::new(
            "top",
            vec![Tensor::vector(&[1.0])],
            FixedStream(Batch::unit()),
            cost,
            frozen(),
        )
        .unwrap();
        let graph = DependencyGraph::new()
            .with_l2u("a", &["top"])
            .with_l2u("b", &["top"]);
        let mut e = Engine::new(
            vec![
                scalar("a", 1.0, a.clone()),
                scalar(
                    "b",
                    1.0,
                    ProblemConfig {
                        unroll_steps: 3,
                        ..a
                    },
                ),
                top,
            ],
            graph,
        )
        .unwrap();
        let report = e.run(12).unwrap();
        assert_eq!(report.notifications["a"], 6);
        assert_eq!(report.notifications["b"], 4);
        assert_eq!(report.steps["top"], 4);
    }

    #[test]
    fn notify_off_edge_is_internal_error() {
        let mut e = bilevel(lower_cfg(JacobianAlgo::AidCg, 1), frozen());
        assert!(matches!(
            e.notify("upper", "lower"),
            Err(Error::InternalConsistency(_))
        ));
    }

    #[test]
    fn duplicate_names_and_cycles_rejected() {
        let dup = Engine::new(
            vec![
                scalar("x", 1.0, ProblemConfig::default()),
                scalar("x", 2.0, ProblemConfig::default()),
            ],
            DependencyGraph::new(),
        );
        assert!(matches!(dup, Err(Error::InvalidArgument(_))));
        let cyc = Engine::new(
            vec![
                scalar("P1", 1.0, ProblemConfig::default()),
                scalar("P2", 2.0, ProblemConfig::default()),
            ],
            DependencyGraph::new()
                .with_l2u("P1", &["P2"])
                .with_l2u("P2", &["P1"]),
        );
        assert!(matches!(cyc, Err(Error::GraphCycle(_))));
    }

    #[test]
    fn unread_lower_is_pruned_with_warning() {
        let lower = scalar("lower", 1.0, ProblemConfig::default());
        let upper = scalar("upper", 1.0, ProblemConfig::default()).with_reads(Vec::<String>::new());
        let graph = DependencyGraph::new()
            .with_u2l("upper", &["lower"])
            .with_l2u("lower", &["upper"]);
        let e = Engine::new(vec![lower, upper], graph).unwrap();
        assert!(e.gradient_targets("upper").unwrap().is_empty());
        assert_eq!(e.warnings().len(), 1);
    }

    #[test]
    fn undeclared_neighbour_read_is_lookup() {
        let p = scalar("p", 1.0, ProblemConfig::default()).with_reads(["ghost"]);
        assert!(matches!(
            Engine::new(vec![p], DependencyGraph::new()),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn non_finite_cost_names_problem() {
        let bad = Problem::new(
            "bad",
            vec![Tensor::vector(&[1.0])],
            FixedStream(Batch::unit()),
            |ctx: &CostContext<'_>, _: &Batch| Ok(ctx.params()[0].sum().scale(f64::INFINITY)),
            ProblemConfig::default(),
        )
        .unwrap();
        let mut e = Engine::new(vec![bad], DependencyGraph::new()).unwrap();
        let err = e.run(1).unwrap_err();
        assert!(matches!(err, Error::Step { ref problem, .. } if problem == "bad"));
        assert!(matches!(err.root(), Error::Numerical { problem: Some(p), .. } if p == "bad"));
    }

    #[test]
    fn trilevel_cascade_order() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let make = |name: &'static str, reads: &'static [&'static str]| {
            let log = Arc::clone(&log);
            Problem::new(
                name,
                vec![Tensor::vector(&[1.0])],
                move || {
                    log.lock().unwrap().push(name);
                    Batch::unit()
                },
                move |ctx: &CostContext<'_>, _: &Batch| {
                    let mut c = ctx.params()[0].sqnorm();
                    for r in reads {
                        c = c.add(&ctx.collaborator(r)?[0].dot(&ctx.params()[0])?)?;
                    }
                    Ok(c)
                },
                lower_cfg(JacobianAlgo::AidCg, 1),
            )
            .unwrap()
        };
        let problems = vec![
            make("pretrain", &["reweight"]),
            make("finetune", &["pretrain"]),
            make("reweight", &["finetune"]),
        ];
        let graph = DependencyGraph::new()
            .with_u2l("reweight", &["pretrain"])
            .with_l2u("pretrain", &["finetune"])
            .with_l2u("finetune", &["reweight"]);
        let mut e = Engine::new(problems, graph).unwrap();
        assert_eq!(e.lowermost(), vec!["pretrain"]);
        assert_eq!(e.paths().get("reweight", "finetune").len(), 1);
        e.run(2).unwrap();
        let order = log.lock().unwrap().clone();
        assert_eq!(
            order,
            ["pretrain", "finetune", "reweight", "pretrain", "finetune", "reweight"]
        );
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let go = || {
            let upper = ProblemConfig {
                lr: 0.05,
                ..Default::default()
            };
            let mut e = bilevel(lower_cfg(JacobianAlgo::AidNeumann, 3), upper);
            e.run(30).unwrap()
        };
        let a = go();
        let b = go();
        let bits = |r: &RunReport| -> Vec<u64> {
            r.loss_traces
                .values()
                .flatten()
                .map(|x| x.to_bits())
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
    }
}
