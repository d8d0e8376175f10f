//! Class-imbalance reweighting: a classifier trained on a long-tailed split
//! with per-sample weights from a small weight network, which is itself
//! trained on a balanced validation split.

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
use serde_json::json;

use crate::config::{BenchConfig, ReweightConfig, Task};
use crate::data::{argmax_rows, balanced_accuracy, two_gaussians, Dataset};
use crate::error::Result;
use crate::report::RunReport;

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn generate(cfg: &ReweightConfig, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let minority = ((cfg.majority_samples as f64 / cfg.imbalance_factor).round() as usize).max(1);
    Splits {
        train: two_gaussians(
            &mut rng,
            cfg.dim,
            cfg.separation,
            [cfg.majority_samples, minority],
        ),
        val: two_gaussians(&mut rng, cfg.dim, cfg.separation, [cfg.val_per_class; 2]),
        test: two_gaussians(&mut rng, cfg.dim, cfg.separation, [cfg.test_per_class; 2]),
    }
}

/// Per-sample weights `sigmoid(net(loss))` for a column of detached losses.
fn sample_weights(net: &Mlp, params: &[Tensor], losses: &Tensor) -> mlo_core::Result<Tensor> {
    Ok(net.forward(params, &losses.detach())?.sigmoid())
}

/// `sum_i w_i l_i / sum_i w_i`, or the plain mean of `w_i l_i`.
fn weighted_loss(weights: &Tensor, losses: &Tensor, normalize: bool) -> mlo_core::Result<Tensor> {
    let weighted = weights.mul(losses)?;
    if normalize {
        weighted.sum().div(&weights.sum())
    } else {
        Ok(weighted.mean())
    }
}

pub fn classifier_default() -> ProblemConfig {
    ProblemConfig {
        lr: 0.1,
        neumann_iterations: 3,
        lr_decay_steps: vec![1000],
        ..Default::default()
    }
    .with_algo(JacobianAlgo::AidNeumann)
}

pub fn meta_weight_default() -> ProblemConfig {
    ProblemConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.001,
        ..Default::default()
    }
}

fn test_balanced_accuracy(net: &Mlp, params: &[Tensor], test: &Dataset) -> Result<f64> {
    let logits = Tape::no_grad(|| net.forward(params, &test.inputs))?;
    Ok(balanced_accuracy(
        &argmax_rows(&logits),
        &test.labels,
        test.classes,
    ))
}

/// Same classifier, stream and step count, every sample weighted equally.
fn baseline(
    config: &BenchConfig,
    cfg: &ReweightConfig,
    classifier_cfg: &ProblemConfig,
    data: &Splits,
) -> Result<(f64, Vec<f64>)> {
    let net = Mlp::new(&[cfg.dim, cfg.hidden, 2], Activation::Relu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1A5);
    let params = net.init(&mut rng);
    let plain = ProblemConfig {
        jacobian_algo: JacobianAlgo::AidCg,
        ..classifier_cfg.clone()
    };
    let classifier = Problem::new(
        "classifier",
        params,
        ShuffledStream::new(
            data.train.inputs.clone(),
            data.train.targets(),
            cfg.batch_size,
            config.seed,
        )?,
        move |ctx: &CostContext<'_>, b: &Batch| {
            softmax_cross_entropy(&net.forward(ctx.params(), &b.inputs)?, &b.targets)
        },
        plain,
    )?;
    let mut engine = Engine::new(vec![classifier], DependencyGraph::new())?;
    let run = engine.run(config.iterations(Task::Reweight))?;
    let net = Mlp::new(&[cfg.dim, cfg.hidden, 2], Activation::Relu)?;
    let acc = test_balanced_accuracy(&net, engine.params("classifier")?, &data.test)?;
    Ok((acc, run.loss_traces["classifier"].clone()))
}

pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let cfg = &config.reweight;
    let mut resolved = config.clone();
    let classifier_cfg = config.problem_config("classifier", classifier_default())?;
    let meta_cfg = config.problem_config("meta_weight", meta_weight_default())?;
    resolved.echo_problem("classifier", &classifier_cfg);
    resolved.echo_problem("meta_weight", &meta_cfg);
    let mut report = RunReport::new(Task::Reweight, resolved);

    let data = generate(cfg, config.seed);
    let net = Mlp::new(&[cfg.dim, cfg.hidden, 2], Activation::Relu)?;
    let wnet = Mlp::new(&[1, cfg.weight_net_hidden, 1], Activation::Relu)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xC1A5);
    let classifier_params = net.init(&mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x3E7A);
    let weight_params = wnet.init(&mut rng);

    let (n, w) = (net.clone(), wnet.clone());
    let normalize = cfg.normalize_weights;
    let classifier = Problem::new(
        "classifier",
        classifier_params,
        ShuffledStream::new(
            data.train.inputs.clone(),
            data.train.targets(),
            cfg.batch_size,
            config.seed,
        )?,
        move |ctx: &CostContext<'_>, b: &Batch| {
            let losses =
                per_sample_cross_entropy(&n.forward(ctx.params(), &b.inputs)?, &b.targets)?;
            let weights = sample_weights(&w, ctx.collaborator("meta_weight")?, &losses)?;
            weighted_loss(&weights, &losses, normalize)
        },
        classifier_cfg.clone(),
    )?;
    let n = net.clone();
    let val = data.val.clone();
    let meta_weight = Problem::new(
        "meta_weight",
        weight_params,
        FixedStream(Batch::new(
            val.inputs.clone(),
            val.targets(),
            (0..val.len()).collect(),
        )?),
        move |ctx: &CostContext<'_>, b: &Batch| {
            softmax_cross_entropy(
                &n.forward(ctx.collaborator("classifier")?, &b.inputs)?,
                &b.targets,
            )
        },
        meta_cfg,
    )?;
    let graph = DependencyGraph::new()
        .with_u2l("meta_weight", &["classifier"])
        .with_l2u("classifier", &["meta_weight"]);
    let mut engine = Engine::new(vec![classifier, meta_weight], graph)?;
    let run = engine.run(config.iterations(Task::Reweight))?;
    report.merge_warnings(&run.warnings);
    report.loss_traces = run.loss_traces;

    let acc = test_balanced_accuracy(&net, engine.params("classifier")?, &data.test)?;
    report.metric("balanced_accuracy", acc);
    report.check_flag("reweight.balanced_accuracy_finite", acc.is_finite());

    // learned weight as a function of the loss, for inspection
    let grid: Vec<f64> = (0..=8).map(|i| 0.25 * i as f64).collect();
    let curve = Tape::no_grad(|| {
        sample_weights(
            &wnet,
            engine.params("meta_weight")?,
            &Tensor::matrix(grid.len(), 1, grid.clone())?,
        )
    })?;
    report.details.insert(
        "weight_curve".into(),
        json!({"loss": grid, "weight": curve.to_vec()}),
    );

    let per_class = Tape::no_grad(|| -> mlo_core::Result<Vec<f64>> {
        let logits = net.forward(engine.params("classifier")?, &data.train.inputs)?;
        let losses = per_sample_cross_entropy(&logits, &data.train.targets())?;
        let weights = sample_weights(&wnet, engine.params("meta_weight")?, &losses)?.to_vec();
        Ok((0..2)
            .map(|c| {
                let ws: Vec<f64> = weights
                    .iter()
                    .zip(&data.train.labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(w, _)| *w)
                    .collect();
                ws.iter().sum::<f64>() / ws.len() as f64
            })
            .collect())
    })?;
    report.metric("mean_weight.majority", per_class[0]);
    report.metric("mean_weight.minority", per_class[1]);

    if cfg.run_baseline {
        let (base_acc, trace) = baseline(config, cfg, &classifier_cfg, &data)?;
        report
            .loss_traces
            .insert("baseline/classifier".into(), trace);
        report.metric("baseline_balanced_accuracy", base_acc);
        report.metric("balanced_accuracy_gain", acc - base_acc);
    }
    Ok(report)
}
