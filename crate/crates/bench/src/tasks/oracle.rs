//! Hypergradients of analytic quadratic programs against closed forms and
//! against central differences of the whole pipeline.

use mlo_core::engine::Engine;
use mlo_core::graph::DependencyGraph;
use mlo_core::problem::{Batch, CostContext, FixedStream, JacobianAlgo, Problem, ProblemConfig};
use mlo_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, OracleConfig, Task};
use crate::error::Result;
use crate::report::RunReport;

/// `|a - b| / |b|` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm
}

fn frozen() -> ProblemConfig {
    ProblemConfig {
        lr: 0.0,
        ..Default::default()
    }
}

const DIAG: [f64; 2] = [2.0, 4.0];
const LAMBDA: [f64; 2] = [4.0, 8.0];
const TARGET: [f64; 2] = [1.0, 1.0];

/// Lower `1/2 w^T diag(2, 4) w - lam^T w`, upper `1/2 |w* - t|^2`; at
/// `lam = (4, 8)` the hypergradient is `diag(2, 4)^-1 (w* - t) = (0.5, 0.25)`.
fn diagonal_bilevel(lower_cfg: ProblemConfig, lam: &[f64]) -> Result<Engine> {
    let lower = Problem::new(
        "lower",
        vec![Tensor::vector(&[0.0, 0.0])],
        FixedStream(Batch::unit()),
        |ctx: &CostContext<'_>, _: &Batch| {
            let w = &ctx.params()[0];
            let lam = &ctx.collaborator("upper")?[0];
            w.mul(&Tensor::vector(&DIAG))?
                .dot(w)?
                .scale(0.5)
                .sub(&lam.dot(w)?)
        },
        lower_cfg,
    )?;
    let upper = Problem::new(
        "upper",
        vec![Tensor::vector(lam)],
        FixedStream(Batch::unit()),
        |ctx: &CostContext<'_>, _: &Batch| {
            let w = &ctx.collaborator("lower")?[0];
            Ok(w.sub(&Tensor::vector(&TARGET))?.sqnorm().scale(0.5))
        },
        frozen(),
    )?;
    let graph = DependencyGraph::new()
        .with_u2l("upper", &["lower"])
        .with_l2u("lower", &["upper"]);
    Ok(Engine::new(vec![lower, upper], graph)?)
}

/// Lower `1/2 |w - lam|^2`, upper `1/2 |w*|^2`: the best response is the identity.
fn identity_bilevel(lower_cfg: ProblemConfig, lam: f64) -> Result<Engine> {
    let lower = Problem::new(
        "lower",
        vec![Tensor::vector(&[0.0])],
        FixedStream(Batch::unit()),
        |ctx: &CostContext<'_>, _: &Batch| {
            let lam = &ctx.collaborator("upper")?[0];
            Ok(ctx.params()[0].sub(lam)?.sqnorm().scale(0.5))
        },
        lower_cfg,
    )?;
    let upper = Problem::new(
        "upper",
        vec![Tensor::vector(&[lam])],
        FixedStream(Batch::unit()),
        |ctx: &CostContext<'_>, _: &Batch| Ok(ctx.collaborator("lower")?[0].sqnorm().scale(0.5)),
        frozen(),
    )?;
    let graph = DependencyGraph::new()
        .with_u2l("upper", &["lower"])
        .with_l2u("lower", &["upper"]);
    Ok(Engine::new(vec![lower, upper], graph)?)
}

const D: usize = 4;
const M: usize = 3;

fn col(values: &[f64]) -> Tensor {
    Tensor::matrix(values.len(), 1, values.to_vec()).expect("nonempty column")
}

/// `I + N N^T / d` with entries of `N` in [-0.5, 0.5]: eigenvalues in [1, 2].
fn spd(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let n: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut a = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = (0..d).map(|k| n[i * d + k] * n[j * d + k]).sum::<f64>() / d as f64;
        }
        a[i * d + i] += 1.0;
    }
    Tensor::matrix(d, d, a).expect("square")
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).expect("nonempty")
}

/// `1/2 x^T A x`
fn quad(x: &Tensor, a: &Tensor) -> mlo_core::Result<Tensor> {
    Ok(x.transpose()?.matmul(a)?.matmul(x)?.sum().scale(0.5))
}

#[derive(Clone)]
struct TrilevelData {
    a1: Tensor,
    b: Tensor,
    a2: Tensor,
    c: Tensor,
    t: Tensor,
    theta: Vec<f64>,
}

impl TrilevelData {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TrilevelData {
            a1: spd(&mut rng, D),
            b: uniform(&mut rng, D, M),
            a2: spd(&mut rng, D),
            c: uniform(&mut rng, D, 1),
            t: uniform(&mut rng, D, 1),
            theta: (0..M).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }
}

const PRETRAIN_UNROLL: usize = 80;
const FINETUNE_UNROLL: usize = 80;

/// Pretrain `1/2 w^T A1 w - w^T B theta`; finetune
/// `1/2 v^T A2 v - c^T v + 1/4 |v - w*|^2`; reweight `1/2 |v* - t|^2 + 0.05 |theta|^2`.
fn quadratic_trilevel(data: &TrilevelData, theta: &[f64], algo: JacobianAlgo) -> Result<Engine> {
    let inner = |lr: f64, unroll: usize| {
        ProblemConfig {
            lr,
            unroll_steps: unroll,
            neumann_iterations: 100,
            ..Default::default()
        }
        .with_algo(algo)
    };
    let (a1, b) = (data.a1.clone(), data.b.clone());
    let pretrain = Problem::new(
        "pretrain",
        vec![Tensor::zeros(&[D, 1])?],
        FixedStream(Batch::unit()),
        move |ctx: &CostContext<'_>, _: &Batch| {
            let w = &ctx.params()[0];
            let th = &ctx.collaborator("reweight")?[0];
            quad(w, &a1)?.sub(&w.transpose()?.matmul(&b)?.matmul(th)?.sum())
        },
        inner(0.4, PRETRAIN_UNROLL),
    )?;
    let (a2, c) = (data.a2.clone(), data.c.clone());
    let finetune = Problem::new(
        "finetune",
        vec![Tensor::zeros(&[D, 1])?],
        FixedStream(Batch::unit()),
        move |ctx: &CostContext<'_>, _: &Batch| {
            let v = &ctx.params()[0];
            let w = &ctx.collaborator("pretrain")?[0];
            quad(v, &a2)?
                .sub(&c.dot(v)?)?
                .add(&v.sub(w)?.sqnorm().scale(0.25))
        },
        inner(0.3, FINETUNE_UNROLL),
    )?;
    let t = data.t.clone();
    let reweight = Problem::new(
        "reweight",
        vec![col(theta)],
        FixedStream(Batch::unit()),
        move |ctx: &CostContext<'_>, _: &Batch| {
            let v = &ctx.collaborator("finetune")?[0];
            v.sub(&t)?
                .sqnorm()
                .scale(0.5)
                .add(&ctx.params()[0].sqnorm().scale(0.05))
        },
        frozen(),
    )?;
    let graph = DependencyGraph::new()
        .with_u2l("reweight", &["pretrain"])
        .with_l2u("pretrain", &["finetune"])
        .with_l2u("finetune", &["reweight"]);
    Ok(Engine::new(vec![pretrain, finetune, reweight], graph)?)
}

/// Hypergradient of `top` one step before its first update, while any
/// unrolled trace is still alive.
fn hypergradient_before_update(
    engine: &mut Engine,
    iterations: usize,
    top: &str,
) -> Result<Vec<f64>> {
    engine.run(iterations - 1)?;
    Ok(engine.compute_hypergradient(top)?[0].to_vec())
}

/// Central differences of the top cost after a full pipeline run.
fn pipeline_differences(
    build: &dyn Fn(&[f64]) -> Result<Engine>,
    iterations: usize,
    top: &str,
    at: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let cost = |p: &[f64]| -> Result<f64> {
        let mut e = build(p)?;
        let r = e.run(iterations)?;
        Ok(*r.loss_traces[top].last().expect("top stepped"))
    };
    (0..at.len())
        .map(|i| {
            let mut p = at.to_vec();
            p[i] += h;
            let up = cost(&p)?;
            p[i] -= 2.0 * h;
            let down = cost(&p)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

const FD_STEP: f64 = 1e-5;

fn lower_cfg(o: &OracleConfig, algo: JacobianAlgo) -> ProblemConfig {
    ProblemConfig {
        lr: o.inner_lr,
        unroll_steps: o.itd_steps + 1,
        neumann_alpha: Some(o.neumann_alpha),
        cg_iterations: 64,
        ..Default::default()
    }
    .with_algo(algo)
}

fn bilevel_checks(o: &OracleConfig, report: &mut RunReport) -> Result<()> {
    let closed = [0.5, 0.25];
    let steps = o.itd_steps + 1;
    let run =
        |cfg: ProblemConfig, report: &mut RunReport, label: &str| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut e = diagonal_bilevel(cfg, &LAMBDA)?;
            let g = hypergradient_before_update(&mut e, steps, "upper")?;
            let w = e.params("lower")?[0].to_vec();
            for (name, trace) in e.report().loss_traces {
                report.loss_traces.insert(format!("{label}/{name}"), trace);
            }
            report.merge_warnings(e.warnings());
            Ok((g, w))
        };

    let (g, _) = run(lower_cfg(o, JacobianAlgo::AidCg), report, "bilevel_aid_cg")?;
    let err = relative_error(&g, &closed);
    report.metric("bilevel.aid_cg.rel_err", err);
    report.check_at_most("oracle.bilevel.aid_cg", err, o.cg_tolerance);

    let mut errs = Vec::new();
    for &k in &o.neumann_orders {
        let cfg = ProblemConfig {
            neumann_iterations: k,
            ..lower_cfg(o, JacobianAlgo::AidNeumann)
        };
        let (g, _) = run(cfg, report, &format!("bilevel_aid_neumann_k{k}"))?;
        let err = relative_error(&g, &closed);
        report.metric(format!("bilevel.aid_neumann.k{k}.rel_err"), err);
        errs.push(err);
    }
    report.check_flag(
        "oracle.bilevel.aid_neumann.strictly_decreasing",
        errs.windows(2).all(|w| w[1] < w[0]),
    );
    let last = *errs.last().expect("orders nonempty");
    report.check_at_most(
        "oracle.bilevel.aid_neumann.highest_order",
        last,
        o.neumann_tolerance,
    );

    let (g, _) = run(
        lower_cfg(o, JacobianAlgo::ItdRmad),
        report,
        "bilevel_itd_rmad",
    )?;
    let err = relative_error(&g, &closed);
    report.metric("bilevel.itd_rmad.rel_err", err);
    report.check_at_most("oracle.bilevel.itd_rmad", err, o.itd_tolerance);

    // one unrolled step: d/dlam [w - lr (A w - lam)] = lr I, so the estimate is lr (w - t)
    let (g, w) = run(lower_cfg(o, JacobianAlgo::AidFd), report, "bilevel_aid_fd")?;
    let one_step: Vec<f64> = w
        .iter()
        .zip(TARGET)
        .map(|(wi, ti)| o.inner_lr * (wi - ti))
        .collect();
    let err = relative_error(&g, &one_step);
    report.metric("bilevel.aid_fd.rel_err_one_step", err);
    report.metric(
        "bilevel.aid_fd.rel_err_closed_form",
        relative_error(&g, &closed),
    );
    report.check_at_most("oracle.bilevel.aid_fd", err, o.fd_tolerance);

    for algo in [
        JacobianAlgo::AidCg,
        JacobianAlgo::AidNeumann,
        JacobianAlgo::ItdRmad,
    ] {
        let cfg = ProblemConfig {
            neumann_iterations: 100,
            ..lower_cfg(o, algo)
        };
        let mut e = diagonal_bilevel(cfg.clone(), &LAMBDA)?;
        let g = hypergradient_before_update(&mut e, steps, "upper")?;
        let build = |p: &[f64]| diagonal_bilevel(cfg.clone(), p);
        let fd = pipeline_differences(&build, steps, "upper", &LAMBDA, FD_STEP)?;
        let err = relative_error(&g, &fd);
        report.metric(format!("bilevel.{algo}.rel_err_pipeline"), err);
        report.check_at_most(
            format!("oracle.bilevel.{algo}.pipeline"),
            err,
            o.pipeline_tolerance,
        );
    }
    Ok(())
}

fn identity_checks(o: &OracleConfig, report: &mut RunReport) -> Result<()> {
    let lam = 3.0;
    let steps = o.itd_steps + 1;
    for algo in JacobianAlgo::ALL {
        let cfg = ProblemConfig {
            // unit curvature: alpha = 1 makes the series exact after one term
            neumann_alpha: Some(1.0),
            ..lower_cfg(o, algo)
        };
        let mut e = identity_bilevel(cfg, lam)?;
        let g = hypergradient_before_update(&mut e, steps, "upper")?;
        let (expected, tol) = match algo {
            JacobianAlgo::AidFd => (o.inner_lr * lam, o.fd_tolerance),
            JacobianAlgo::AidCg => (lam, o.cg_tolerance),
            JacobianAlgo::AidNeumann => (lam, o.neumann_tolerance),
            JacobianAlgo::ItdRmad => (lam, o.itd_tolerance),
        };
        let err = relative_error(&g, &[expected]);
        report.metric(format!("identity.{algo}.hypergradient"), g[0]);
        report.check_at_most(format!("oracle.identity.{algo}"), err, tol);
    }
    Ok(())
}

fn trilevel_checks(o: &OracleConfig, seed: u64, report: &mut RunReport) -> Result<()> {
    let data = TrilevelData::new(seed);
    let iterations = PRETRAIN_UNROLL * FINETUNE_UNROLL;
    // Unrolled differentiation is left out: the pretrain optimum moves during
    // every finetune unroll, which a single trace does not capture.
    for algo in [JacobianAlgo::AidCg, JacobianAlgo::AidNeumann] {
        let mut e = quadratic_trilevel(&data, &data.theta, algo)?;
        let g = hypergradient_before_update(&mut e, iterations, "reweight")?;
        report.merge_warnings(e.warnings());
        let build = |p: &[f64]| quadratic_trilevel(&data, p, algo);
        let fd = pipeline_differences(&build, iterations, "reweight", &data.theta, FD_STEP)?;
        let err = relative_error(&g, &fd);
        report.metric(format!("trilevel.{algo}.rel_err_pipeline"), err);
        report.check_at_most(
            format!("oracle.trilevel.{algo}.pipeline"),
            err,
            o.pipeline_tolerance,
        );
    }
    Ok(())
}

pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let mut report = RunReport::new(Task::Oracle, config.clone());
    bilevel_checks(&config.oracle, &mut report)?;
    identity_checks(&config.oracle, &mut report)?;
    trilevel_checks(&config.oracle, config.seed, &mut report)?;
    Ok(report)
}
