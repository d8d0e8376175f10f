//! Reverse-mode gradients of every op against central differences.

use std::sync::Arc;

use mlo_core::tensor::{
    grad, mse, per_sample_cross_entropy, softmax_cross_entropy, weighted_softmax_cross_entropy,
    CustomUnary,
};
use mlo_core::{Result as CoreResult, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BenchConfig, Task};
use crate::error::Result;
use crate::report::RunReport;

/// Sampling range of one op input.
#[derive(Debug, Clone, Copy)]
enum Domain {
    Any,
    Positive,
    /// Magnitude in [0.2, 1] with random sign; keeps kinks and poles away.
    AwayFromZero,
    /// Rows summing to one.
    Simplex,
}

type OpFn = fn(&[Tensor]) -> CoreResult<Tensor>;

struct OpCase {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Domain)>,
    f: OpFn,
}

fn case(name: &'static str, inputs: &[(&[usize], Domain)], f: OpFn) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        f,
    }
}

/// `x^3`, optionally with a backward rule that drops the factor 3.
#[derive(Debug)]
struct Cube {
    corrupted: bool,
}

impl CustomUnary for Cube {
    fn name(&self) -> &str {
        if self.corrupted {
            "corrupted_cube"
        } else {
            "cube"
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * v * v).collect()
    }

    fn backward(&self, x: &Tensor, grad: &Tensor) -> CoreResult<Tensor> {
        let factor = if self.corrupted { 1.0 } else { 3.0 };
        x.square().scale(factor).mul(grad)
    }
}

const M23: &[usize] = &[2, 3];
const M32: &[usize] = &[3, 2];
const V4: &[usize] = &[4];
const S: &[usize] = &[];

fn registry(include_corrupted: bool) -> Vec<OpCase> {
    use Domain::*;
    let mut ops = vec![
        case("add", &[(M23, Any), (M23, Any)], |x| x[0].add(&x[1])),
        case("sub", &[(M23, Any), (M23, Any)], |x| x[0].sub(&x[1])),
        case("mul", &[(M23, Any), (M23, Any)], |x| x[0].mul(&x[1])),
        case("div", &[(M23, Any), (M23, AwayFromZero)], |x| {
            x[0].div(&x[1])
        }),
        case("scalar_broadcast", &[(S, Any), (M23, Any)], |x| {
            x[0].mul(&x[1])?.add(&x[0])
        }),
        case("neg", &[(M23, Any)], |x| Ok(x[0].neg())),
        case("relu", &[(M23, AwayFromZero)], |x| Ok(x[0].relu())),
        case("tanh", &[(M23, Any)], |x| Ok(x[0].tanh())),
        case("sigmoid", &[(M23, Any)], |x| Ok(x[0].sigmoid())),
        case("exp", &[(M23, Any)], |x| Ok(x[0].exp())),
        case("log", &[(M23, Positive)], |x| x[0].log()),
        case("scale", &[(M23, Any)], |x| Ok(x[0].scale(-1.7))),
        case("square", &[(M23, Any)], |x| Ok(x[0].square())),
        case("add_scalar", &[(M23, Any)], |x| Ok(x[0].add_scalar(0.3))),
        case("rsub_scalar", &[(M23, Any)], |x| Ok(x[0].rsub_scalar(0.3))),
        case("matmul", &[(M23, Any), (M32, Any)], |x| x[0].matmul(&x[1])),
        case("transpose", &[(M23, Any)], |x| x[0].transpose()),
        case("reshape", &[(M23, Any)], |x| x[0].reshape(&[3, 2])),
        case("sum", &[(M23, Any)], |x| Ok(x[0].sum())),
        case("mean", &[(M23, Any)], |x| Ok(x[0].mean())),
        case("expand", &[(S, Any)], |x| x[0].expand(&[2, 3])),
        case("dot", &[(V4, Any), (V4, Any)], |x| x[0].dot(&x[1])),
        case("sqnorm", &[(V4, Any)], |x| Ok(x[0].sqnorm())),
        case("log_softmax", &[(M23, Any)], |x| x[0].log_softmax()),
        case("softmax", &[(M23, Any)], |x| x[0].softmax()),
        case("sum_rows", &[(M23, Any)], |x| x[0].sum_rows()),
        case("add_row", &[(M23, Any), (&[3], Any)], |x| {
            x[0].add_row(&x[1])
        }),
        case("repeat_cols", &[(&[2, 1], Any)], |x| x[0].repeat_cols(3)),
        case("mse", &[(M23, Any), (M23, Any)], |x| mse(&x[0], &x[1])),
        case(
            "per_sample_cross_entropy",
            &[(M23, Any), (M23, Simplex)],
            |x| per_sample_cross_entropy(&x[0], &x[1]),
        ),
        case(
            "softmax_cross_entropy",
            &[(M23, Any), (M23, Simplex)],
            |x| softmax_cross_entropy(&x[0], &x[1]),
        ),
        case(
            "weighted_softmax_cross_entropy",
            &[(M23, Any), (M23, Simplex), (&[2], Positive)],
            |x| weighted_softmax_cross_entropy(&x[0], &x[1], &x[2]),
        ),
        case("custom_unary", &[(M23, Any)], |x| {
            x[0].apply_custom(Arc::new(Cube { corrupted: false }))
        }),
    ];
    if include_corrupted {
        ops.push(case("corrupted_custom_unary", &[(M23, Any)], |x| {
            x[0].apply_custom(Arc::new(Cube { corrupted: true }))
        }));
    }
    ops
}

fn sample(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product::<usize>().max(1);
    let mut data: Vec<f64> = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-1.0..1.0),
            Domain::Positive => rng.random_range(0.5..2.0),
            Domain::AwayFromZero | Domain::Simplex => {
                let m = rng.random_range(0.2..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        })
        .collect();
    if let Domain::Simplex = domain {
        let cols = shape[1];
        for row in data.chunks_mut(cols) {
            let total: f64 = row.iter().map(|v| v.abs()).sum();
            row.iter_mut().for_each(|v| *v = v.abs() / total);
        }
    }
    Tensor::new(shape, data).expect("nonempty shape")
}

/// Error with a unit floor on the denominator, so tiny gradients are judged absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Largest error over all input entries of one random case.
fn check_case(op: &OpCase, inputs: &[Tensor], cotangent_seed: u64, step: f64) -> CoreResult<f64> {
    let out_shape = (op.f)(inputs)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cotangent_seed);
    let cot = sample(&mut rng, &out_shape, Domain::Any);
    let scalar = |xs: &[Tensor]| -> CoreResult<Tensor> {
        let y = (op.f)(xs)?;
        y.mul(&cot)?.sum().add(&Tensor::scalar(0.0))
    };
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad()).collect();
    let analytic = grad(&scalar(&leaves)?, &leaves, false)?;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let eval = |d: f64| -> CoreResult<f64> {
                let mut moved: Vec<Tensor> = inputs.iter().map(Tensor::deep_copy).collect();
                moved[i].data_mut()[j] += d;
                scalar(&moved)?.item()
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    Ok(worst)
}

pub fn run(config: &BenchConfig) -> Result<RunReport> {
    let cfg = &config.gradcheck;
    let mut report = RunReport::new(Task::Gradcheck, config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let ops = registry(cfg.include_corrupted);
    let mut cases = 0;
    for op in &ops {
        let mut worst: f64 = 0.0;
        for _ in 0..cfg.cases_per_op {
            let inputs: Vec<Tensor> = op
                .inputs
                .iter()
                .map(|(shape, domain)| sample(&mut rng, shape, *domain))
                .collect();
            worst = worst.max(check_case(op, &inputs, rng.random(), cfg.step)?);
            cases += 1;
        }
        report.metric(format!("max_rel_err.{}", op.name), worst);
        report.check_at_most(format!("gradcheck.{}", op.name), worst, cfg.tolerance);
    }
    report.metric("cases", cases as f64);
    report.metric("ops", ops.len() as f64);
    Ok(report)
}
