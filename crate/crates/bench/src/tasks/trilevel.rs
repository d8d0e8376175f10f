//! Three-level pipeline: pretrain on a partly corrupted source domain with
//! per-sample weights, finetune on a small target set with a proximal pull
//! toward the pretrained solution, and learn the weights from target
//! validation performance.

use mlo_core::engine::Engine;
use mlo_core::graph::DependencyGraph;
use mlo_core::nn::{Activation, Mlp};
use mlo_core::problem::{
    Batch, CostContext, FixedStream, JacobianAlgo, Problem, ProblemConfig, ShuffledStream,
};
use mlo_core::tensor::{per_sample_cross_entropy, softmax_cross_entropy, OptimizerKind, Tape};
use mlo_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, Task, TrilevelConfig};
use crate::data::{accuracy, argmax_rows, gaussian_rows, two_gaussians, Dataset};
use crate::error::Result;
use crate::report::RunReport;

struct Splits {
    source: Dataset,
    /// Whether each source row belongs to the shifted cluster.
    corrupted: Vec<bool>,
    target_train: Dataset,
    target_val: Dataset,
    target_test: Dataset,
}

/// Unit vector orthogonal to the class axis (all-ones direction).
fn shift_direction(dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![1.0];
    }
    let mut u = vec![0.0; dim];
    u[0] = 1.0;
    u[1] = -1.0;
    u.iter().map(|x| x / 2f64.sqrt()).collect()
}

fn split_counts(n: usize) -> [usize; 2] {
    [n / 2, n - n / 2]
}

fn generate(cfg: &TrilevelConfig, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_bad = (cfg.source_samples as f64 * cfg.corrupt_fraction).round() as usize;
    let n_clean = cfg.source_samples - n_bad;
    let clean = two_gaussians(&mut rng, cfg.dim, cfg.separation, split_counts(n_clean));

    // class-0 samples translated by `shift` along (e + u) / sqrt(2), into
    // class-1 territory; at shift 0 they are ordinary class-0 samples
    let unit = 1.0 / (cfg.dim as f64).sqrt();
    let u = shift_direction(cfg.dim);
    let center: Vec<f64> = (0..cfg.dim)
        .map(|i| -cfg.separation * unit + cfg.shift * (unit + u[i]) / 2f64.sqrt())
        .collect();
    let mut inputs = clean.inputs.to_vec();
    inputs.extend(gaussian_rows(&mut rng, &center, 1.0, n_bad));
    let mut labels = clean.labels.clone();
    labels.extend(std::iter::repeat_n(0, n_bad));
    let mut corrupted = vec![false; n_clean];
    corrupted.extend(std::iter::repeat_n(true, n_bad));
    let source = Dataset {
        inputs: Tensor::matrix(labels.len(), cfg.dim, inputs).expect("nonempty source"),
        labels,
        classes: 2,
    };
    Splits {
        source,
        corrupted,
        target_train: two_gaussians(
            &mut rng,
            cfg.dim,
            cfg.separation,
            split_counts(cfg.target_train),
        ),
        target_val: two_gaussians(
            &mut rng,
            cfg.dim,
            cfg.separation,
            split_counts(cfg.target_val),
        ),
        target_test: two_gaussians(
            &mut rng,
            cfg.dim,
            cfg.separation,
            split_counts(cfg.target_test),
        ),
    }
}

pub fn pretrain_default() -> ProblemConfig {
    ProblemConfig {
        lr: 0.5,
        unroll_steps: 10,
        neumann_iterations: 3,
        ..Default::default()
    }
    .with_algo(JacobianAlgo::AidNeumann)
}

pub fn finetune_default() -> ProblemConfig {
    ProblemConfig {
        lr: 0.5,
        unroll_steps: 5,
        neumann_iterations: 3,
        ..Default::default()
    }
    .with_algo(JacobianAlgo::AidNeumann)
}

pub fn reweight_default() -> ProblemConfig {
    ProblemConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.05,
        ..Default::default()
    }
}

fn linear(dim: usize) -> Mlp {
    Mlp::new(&[dim, 2], Activation::Relu).expect("valid sizes")
}

fn proximal_term(v: &[Tensor], w: &[Tensor], lambda: f64) -> mlo_core::Result<Tensor> {
    let mut total = Tensor::scalar(0.0);
    for (a, b) in v.iter().zip(w) {
        total = total.add(&a.sub(b)?.sqnorm())?;
    }
    Ok(total.scale(lambda))
}

struct Built {
    engine: Engine,
    linear: Mlp,
    weight_net: Mlp,
}

fn fixed_batch(d: &Dataset) -> Result<Batch> {
    Ok(Batch::new(
        d.inputs.clone(),
        d.targets(),
        (0..d.len()).collect(),
    )?)
}

/// With `reweighted = false` the reweight problem is absent and pretraining
/// weighs every source sample equally.
fn build(
    config: &BenchConfig,
    cfgs: &[ProblemConfig; 3],
    data: &Splits,
    reweighted: bool,
) -> Result<Built> {
    let cfg = &config.trilevel;
    let lin = linear(cfg.dim);
    let wnet = Mlp::new(&[cfg.dim, cfg.weight_net_hidden, 1], Activation::Tanh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7A11);
    let pre_params = lin.init(&mut rng);
    let fine_params = lin.init(&mut rng);
    let weight_params = wnet.init(&mut rng);

    let (l, w) = (lin.clone(), wnet.clone());
    let pretrain = Problem::new(
        "pretrain",
        pre_params,
        ShuffledStream::new(
            data.source.inputs.clone(),
            data.source.targets(),
            cfg.batch_size,
            config.seed,
        )?,
        move |ctx: &CostContext<'_>, b: &Batch| {
            let losses =
                per_sample_cross_entropy(&l.forward(ctx.params(), &b.inputs)?, &b.targets)?;
            if !reweighted {
                return Ok(losses.mean());
            }
            let weights = w
                .forward(ctx.collaborator("reweight")?, &b.inputs)?
                .sigmoid();
            weights.mul(&losses)?.sum().div(&weights.sum())
        },
        cfgs[0].clone(),
    )?;
    let l = lin.clone();
    let lambda = cfg.proximal;
    let finetune = Problem::new(
        "finetune",
        fine_params,
        FixedStream(fixed_batch(&data.target_train)?),
        move |ctx: &CostContext<'_>, b: &Batch| {
            let fit = softmax_cross_entropy(&l.forward(ctx.params(), &b.inputs)?, &b.targets)?;
            fit.add(&proximal_term(
                ctx.params(),
                ctx.collaborator("pretrain")?,
                lambda,
            )?)
        },
        cfgs[1].clone(),
    )?;
    let mut problems = vec![pretrain, finetune];
    let mut graph = DependencyGraph::new().with_l2u("pretrain", &["finetune"]);
    if reweighted {
        let l = lin.clone();
        problems.push(Problem::new(
            "reweight",
            weight_params,
            FixedStream(fixed_batch(&data.target_val)?),
            move |ctx: &CostContext<'_>, b: &Batch| {
                softmax_cross_entropy(
                    &l.forward(ctx.collaborator("finetune")?, &b.inputs)?,
                    &b.targets,
                )
            },
            cfgs[2].clone(),
        )?);
        graph = graph
            .with_u2l("reweight", &["pretrain"])
            .with_l2u("finetune", &["reweight"]);
    }
    Ok(Built {
        engine: Engine::new(problems, graph)?,
        linear: lin,
        weight_net: wnet,
    })
}

fn target_accuracy(built: &Built, test: &Dataset) -> Result<f64> {
    let logits = Tape::no_grad(|| {
        built
            .linear
            .forward(built.engine.params("finetune")?, &test.inputs)
    })?;
    Ok(accuracy(&argmax_rows(&logits), &test.labels))
}

pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let cfg = &config.trilevel;
    let mut resolved = config.clone();
    let cfgs = [
        config.problem_config("pretrain", pretrain_default())?,
        config.problem_config("finetune", finetune_default())?,
        config.problem_config("reweight", reweight_default())?,
    ];
    for (name, c) in Task::Trilevel.problem_names().iter().zip(&cfgs) {
        resolved.echo_problem(name, c);
    }
    let mut report = RunReport::new(Task::Trilevel, resolved);
    let data = generate(cfg, config.seed);
    let iterations = config.iterations(Task::Trilevel);

    let mut built = build(config, &cfgs, &data, true)?;
    let run = built.engine.run(iterations)?;
    report.merge_warnings(&run.warnings);
    report.loss_traces = run.loss_traces;
    let acc = target_accuracy(&built, &data.target_test)?;
    report.metric("target_accuracy", acc);
    report.check_flag("trilevel.target_accuracy_finite", acc.is_finite());

    let weights = Tape::no_grad(|| -> mlo_core::Result<Vec<f64>> {
        let params = built.engine.params("reweight")?;
        Ok(built
            .weight_net
            .forward(params, &data.source.inputs)?
            .sigmoid()
            .to_vec())
    })?;
    let mean_where = |flag: bool| {
        let ws: Vec<f64> = weights
            .iter()
            .zip(&data.corrupted)
            .filter(|(_, &c)| c == flag)
            .map(|(w, _)| *w)
            .collect();
        if ws.is_empty() {
            f64::NAN
        } else {
            ws.iter().sum::<f64>() / ws.len() as f64
        }
    };
    report.metric("mean_weight.corrupted", mean_where(true));
    report.metric("mean_weight.clean", mean_where(false));

    if cfg.run_baseline {
        let mut base = build(config, &cfgs, &data, false)?;
        let run = base.engine.run(iterations)?;
        for (name, trace) in run.loss_traces {
            report.loss_traces.insert(format!("baseline/{name}"), trace);
        }
        let base_acc = target_accuracy(&base, &data.target_test)?;
        report.metric("baseline_target_accuracy", base_acc);
        report.metric("target_accuracy_gain", acc - base_acc);
    }
    Ok(report)
}
