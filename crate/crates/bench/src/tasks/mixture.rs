//! Feature-map selection: a linear readout over a softmax-weighted mixture of
//! three fixed nonlinear feature maps, with the mixture logits chosen on a
//! validation split.

use mlo_core::engine::Engine;
use mlo_core::graph::DependencyGraph;
use mlo_core::problem::{
    Batch, CostContext, FixedStream, JacobianAlgo, Problem, ProblemConfig, ShuffledStream,
};
use mlo_core::tensor::{mse, OptimizerKind, Tape};
use mlo_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::{BenchConfig, MixtureConfig, Task};
use crate::data::normal;
use crate::error::Result;
use crate::report::RunReport;

pub const MAPS: usize = 3;

/// Three fixed maps `R^input_dim -> R^feature_dim`, each a random projection
/// followed by a different nonlinearity.
struct FeatureMaps {
    input_dim: usize,
    feature_dim: usize,
    projections: Vec<Vec<f64>>,
    offsets: Vec<Vec<f64>>,
}

impl FeatureMaps {
    fn new(rng: &mut ChaCha8Rng, input_dim: usize, feature_dim: usize) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let projections = (0..MAPS)
            .map(|_| {
                (0..input_dim * feature_dim)
                    .map(|_| scale * 2.0 * normal(rng))
                    .collect()
            })
            .collect();
        let offsets = (0..MAPS)
            .map(|_| {
                (0..feature_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        FeatureMaps {
            input_dim,
            feature_dim,
            projections,
            offsets,
        }
    }

    fn apply(&self, map: usize, x: &[f64]) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|j| {
                let z = self.offsets[map][j]
                    + (0..self.input_dim)
                        .map(|i| x[i] * self.projections[map][i * self.feature_dim + j])
                        .sum::<f64>();
                match map {
                    0 => z.tanh(),
                    1 => z.cos(),
                    _ => z.max(0.0) - 0.5,
                }
            })
            .collect()
    }

    /// All maps side by side: `[n, MAPS * feature_dim]`.
    fn features(&self, xs: &[Vec<f64>]) -> Tensor {
        let data: Vec<f64> = xs
            .iter()
            .flat_map(|x| (0..MAPS).flat_map(|m| self.apply(m, x)).collect::<Vec<_>>())
            .collect();
        Tensor::matrix(xs.len(), MAPS * self.feature_dim, data).expect("nonempty split")
    }
}

struct Splits {
    train_x: Tensor,
    train_y: Tensor,
    val_x: Tensor,
    val_y: Tensor,
}

fn generate(cfg: &MixtureConfig, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let maps = FeatureMaps::new(&mut rng, cfg.input_dim, cfg.feature_dim);
    let beta: Vec<f64> = (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect();
    let mut split = |n: usize| {
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..cfg.input_dim)
                    .map(|_| rng.random_range(-2.0..2.0))
                    .collect()
            })
            .collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| {
                let f = maps.apply(cfg.true_map, x);
                f.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + cfg.noise * normal(&mut rng)
            })
            .collect();
        (
            maps.features(&xs),
            Tensor::matrix(n, 1, ys).expect("nonempty split"),
        )
    };
    let (train_x, train_y) = split(cfg.train_samples);
    let (val_x, val_y) = split(cfg.val_samples);
    Splits {
        train_x,
        train_y,
        val_x,
        val_y,
    }
}

/// Softmax of the logits as a `[1, MAPS]` row.
fn mixture_weights(alpha: &Tensor) -> mlo_core::Result<Tensor> {
    alpha.reshape(&[1, MAPS])?.softmax()
}

/// Constant matrices turning mixture weights `s` into the `[MAPS*f, f]`
/// mixing matrix `sum_i s_i P_i`, where `P_i` selects block `i`.
#[derive(Clone)]
struct Mixer {
    spread: Tensor,
    stack: Tensor,
    feature_dim: usize,
}

impl Mixer {
    fn new(f: usize) -> Self {
        let mut spread = vec![0.0; MAPS * MAPS * f];
        let mut stack = vec![0.0; MAPS * f * f];
        for m in 0..MAPS {
            for j in 0..f {
                spread[m * MAPS * f + m * f + j] = 1.0;
                stack[(m * f + j) * f + j] = 1.0;
            }
        }
        Mixer {
            spread: Tensor::matrix(MAPS, MAPS * f, spread).expect("sizes"),
            stack: Tensor::matrix(MAPS * f, f, stack).expect("sizes"),
            feature_dim: f,
        }
    }

    fn predict(
        &self,
        features: &Tensor,
        alpha: &Tensor,
        readout: &Tensor,
    ) -> mlo_core::Result<Tensor> {
        let per_column = mixture_weights(alpha)?.matmul(&self.spread)?;
        let mixing = per_column
            .transpose()?
            .repeat_cols(self.feature_dim)?
            .mul(&self.stack)?;
        features.matmul(&mixing)?.matmul(readout)
    }
}

pub fn readout_default() -> ProblemConfig {
    ProblemConfig {
        lr: 0.1,
        unroll_steps: 5,
        fd_epsilon: 0.01,
        ..Default::default()
    }
    .with_algo(JacobianAlgo::AidFd)
}

pub fn architecture_default() -> ProblemConfig {
    ProblemConfig {
        optimizer: OptimizerKind::Adam,
        lr: 0.05,
        ..Default::default()
    }
}

pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let cfg = &config.mixture;
    let mut resolved = config.clone();
    let readout_cfg = config.problem_config("readout", readout_default())?;
    let arch_cfg = config.problem_config("architecture", architecture_default())?;
    resolved.echo_problem("readout", &readout_cfg);
    resolved.echo_problem("architecture", &arch_cfg);
    let mut report = RunReport::new(Task::Mixture, resolved);

    let data = generate(cfg, config.seed);
    let mixer = Mixer::new(cfg.feature_dim);

    let m = mixer.clone();
    let readout = Problem::new(
        "readout",
        vec![Tensor::zeros(&[cfg.feature_dim, 1])?],
        ShuffledStream::new(
            data.train_x.clone(),
            data.train_y.clone(),
            cfg.batch_size,
            config.seed,
        )?,
        move |ctx: &CostContext<'_>, b: &Batch| {
            let alpha = &ctx.collaborator("architecture")?[0];
            mse(&m.predict(&b.inputs, alpha, &ctx.params()[0])?, &b.targets)
        },
        readout_cfg,
    )?;
    let m = mixer.clone();
    let architecture = Problem::new(
        "architecture",
        vec![Tensor::zeros(&[MAPS])?],
        FixedStream(Batch::new(
            data.val_x.clone(),
            data.val_y.clone(),
            (0..cfg.val_samples).collect(),
        )?),
        move |ctx: &CostContext<'_>, b: &Batch| {
            let w = &ctx.collaborator("readout")?[0];
            mse(&m.predict(&b.inputs, &ctx.params()[0], w)?, &b.targets)
        },
        arch_cfg,
    )?;
    let graph = DependencyGraph::new()
        .with_u2l("architecture", &["readout"])
        .with_l2u("readout", &["architecture"]);
    let mut engine = Engine::new(vec![readout, architecture], graph)?;

    let initial = mixture_weights(&engine.params("architecture")?[0])?.to_vec();
    let uniform = initial
        .iter()
        .all(|s| (s - 1.0 / MAPS as f64).abs() < 1e-15);
    report.check_flag("mixture.initial_softmax_uniform", uniform);

    let run = engine.run(config.iterations(Task::Mixture))?;
    report.loss_traces = run.loss_traces;
    report.merge_warnings(&run.warnings);

    let alpha = engine.params("architecture")?[0].to_vec();
    let readout_w = engine.params("readout")?[0].clone();
    let (val_loss, train_loss) = Tape::no_grad(|| -> mlo_core::Result<(f64, f64)> {
        let a = Tensor::vector(&alpha);
        let v = mse(&mixer.predict(&data.val_x, &a, &readout_w)?, &data.val_y)?.item()?;
        let t = mse(
            &mixer.predict(&data.train_x, &a, &readout_w)?,
            &data.train_y,
        )?
        .item()?;
        Ok((v, t))
    })?;
    let selected = alpha
        .iter()
        .enumerate()
        .fold(0, |best, (i, &a)| if a > alpha[best] { i } else { best });
    report.metric("final_val_loss", val_loss);
    report.metric("final_train_loss", train_loss);
    report.metric("selected_map", selected as f64);
    report.metric(
        "selected_true_map",
        f64::from(u8::from(selected == cfg.true_map)),
    );
    report.details.insert("alpha".into(), json!(alpha));
    report.details.insert(
        "mixture_weights".into(),
        json!(mixture_weights(&Tensor::vector(&alpha))?.to_vec()),
    );
    report.check_flag("mixture.final_val_loss_finite", val_loss.is_finite());
    Ok(report)
}
