//! Synthetic datasets and classification metrics.

use mlo_core::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

/// A labelled dataset with rows of `inputs` aligned to `labels`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn targets(&self) -> Tensor {
        onehot(&self.labels, self.classes)
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs.data()[i * d..(i + 1) * d]
    }
}

pub fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data).expect("nonempty labels")
}

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Isotropic Gaussian samples around `center` with standard deviation `sigma`.
pub fn gaussian_rows<R: Rng>(rng: &mut R, center: &[f64], sigma: f64, n: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|_| {
            center
                .iter()
                .map(|&c| c + sigma * normal(rng))
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Two unit-variance classes with means `-mu e` (class 0) and `+mu e`
/// (class 1), `e` the normalized all-ones direction.
pub fn two_gaussians<R: Rng>(rng: &mut R, dim: usize, mu: f64, counts: [usize; 2]) -> Dataset {
    let unit = 1.0 / (dim as f64).sqrt();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (class, &n) in counts.iter().enumerate() {
        let sign = if class == 0 { -1.0 } else { 1.0 };
        let center = vec![sign * mu * unit; dim];
        x.extend(gaussian_rows(rng, &center, 1.0, n));
        labels.extend(std::iter::repeat_n(class, n));
    }
    Dataset {
        inputs: Tensor::matrix(labels.len(), dim, x).expect("nonempty dataset"),
        labels,
        classes: 2,
    }
}

/// Row-wise argmax.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}

/// Mean per-class recall over classes present in `truth`.
pub fn balanced_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        total[t] += 1;
        if p == t {
            hit[t] += 1;
        }
    }
    let present: Vec<f64> = (0..classes)
        .filter(|&c| total[c] > 0)
        .map(|c| hit[c] as f64 / total[c] as f64)
        .collect();
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
