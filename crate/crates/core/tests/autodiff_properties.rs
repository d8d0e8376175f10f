//! Reverse-mode gradients and second-order products against finite differences.

use mlo_core::tensor::{cross_vjp, flat, grad, hvp, HessianOperator};
use mlo_core::Tensor;
use proptest::prelude::*;

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central differences of a scalar function of a parameter list.
fn fd_grad(f: &dyn Fn(&[Tensor]) -> f64, at: &[Tensor]) -> Vec<Vec<f64>> {
    at.iter()
        .enumerate()
        .map(|(i, t)| {
            (0..t.numel())
                .map(|j| {
                    let bump = |d: f64| {
                        let mut moved: Vec<Tensor> = at.iter().map(Tensor::deep_copy).collect();
                        moved[i].data_mut()[j] += d;
                        f(&moved)
                    };
                    (bump(H) - bump(-H)) / (2.0 * H)
                })
                .collect()
        })
        .collect()
}

/// A random smooth composition `[3, 4] x [4, 2] -> scalar` built from a
/// sequence of op codes.
fn composite(codes: &[u8], x: &Tensor, w: &Tensor) -> Tensor {
    let mut h = x.matmul(w).unwrap();
    for &c in codes {
        h = match c % 9 {
            0 => h.tanh(),
            1 => h.sigmoid(),
            2 => h.mul(&h).unwrap().scale(0.5),
            3 => h.exp().scale(0.1),
            4 => h.add_scalar(2.0).square().add_scalar(1.0).log().unwrap(),
            5 => h.log_softmax().unwrap(),
            6 => h.sub(&h.scale(0.3).tanh()).unwrap(),
            7 => h.div(&h.square().add_scalar(1.0)).unwrap(),
            _ => h.transpose().unwrap().transpose().unwrap().neg(),
        };
    }
    h.sum_rows().unwrap().sqnorm()
}

fn tensor(shape: &[usize], values: Vec<f64>) -> Tensor {
    Tensor::new(shape, values).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_gradients_match_central_differences(
        codes in prop::collection::vec(0u8..9, 1..5),
        xs in prop::collection::vec(-1.0f64..1.0, 12),
        ws in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let x = tensor(&[3, 4], xs).requires_grad();
        let w = tensor(&[4, 2], ws).requires_grad();
        let out = composite(&codes, &x, &w);
        let analytic = grad(&out, &[x.clone(), w.clone()], false).unwrap();
        let numeric = fd_grad(&|p: &[Tensor]| composite(&codes, &p[0], &p[1]).item().unwrap(), &[x, w]);
        for (a, n) in analytic.iter().zip(&numeric) {
            for (&ai, &ni) in a.data().iter().zip(n) {
                prop_assert!(rel_err(ai, ni) < 1e-5, "analytic {ai} numeric {ni}");
            }
        }
    }

    #[test]
    fn hessian_is_symmetric(
        xs in prop::collection::vec(-1.0f64..1.0, 6),
        us in prop::collection::vec(-1.0f64..1.0, 6),
        vs in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        let x = tensor(&[2, 3], xs).requires_grad();
        let f = x.tanh().log_softmax().unwrap().sum_rows().unwrap().sqnorm();
        let op = HessianOperator::new(&f, std::slice::from_ref(&x)).unwrap();
        let u = [tensor(&[2, 3], us)];
        let v = [tensor(&[2, 3], vs)];
        let uhv = flat::dot(&u, &op.apply(&v).unwrap()).unwrap();
        let vhu = flat::dot(&v, &op.apply(&u).unwrap()).unwrap();
        prop_assert!((uhv - vhu).abs() < 1e-10 * (1.0 + uhv.abs()));
    }

    #[test]
    fn hvp_is_linear(
        xs in prop::collection::vec(-1.0f64..1.0, 4),
        v1 in prop::collection::vec(-1.0f64..1.0, 4),
        v2 in prop::collection::vec(-1.0f64..1.0, 4),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let x = Tensor::vector(&xs).requires_grad();
        let f = x.sigmoid().mul(&x).unwrap().sqnorm();
        let t1 = [Tensor::vector(&v1)];
        let t2 = [Tensor::vector(&v2)];
        let combo = flat::lincomb(a, &t1, b, &t2).unwrap();
        let lhs = hvp(&f, std::slice::from_ref(&x), &combo).unwrap();
        let r1 = hvp(&f, std::slice::from_ref(&x), &t1).unwrap();
        let r2 = hvp(&f, &[x], &t2).unwrap();
        let rhs = flat::lincomb(a, &r1, b, &r2).unwrap();
        for (l, r) in lhs[0].data().iter().zip(rhs[0].data()) {
            prop_assert!((l - r).abs() < 1e-8);
        }
    }
}

/// Two-layer perceptron loss as a function of both weight matrices.
fn mlp_loss(w1: &Tensor, w2: &Tensor, x: &Tensor, y: &Tensor) -> Tensor {
    let h = x.matmul(w1).unwrap().tanh();
    let out = h.matmul(w2).unwrap();
    out.sub(y).unwrap().square().mean()
}

#[test]
fn second_order_products_match_gradient_differences_on_perceptrons() {
    let x = tensor(
        &[5, 3],
        (0..15).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect(),
    );
    let y = tensor(
        &[5, 2],
        (0..10).map(|i| ((i * 3 % 7) as f64 - 3.0) / 3.0).collect(),
    );
    let w1 = tensor(
        &[3, 4],
        (0..12).map(|i| ((i * 5 % 13) as f64 - 6.0) / 8.0).collect(),
    )
    .requires_grad();
    let w2 = tensor(
        &[4, 2],
        (0..8).map(|i| ((i * 3 % 5) as f64 - 2.0) / 4.0).collect(),
    )
    .requires_grad();
    let v = tensor(&[3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
    let u = tensor(&[3, 4], (0..12).map(|i| (i as f64 * 0.91).cos()).collect());

    let grad_w1_at = |w1: &Tensor, w2: &Tensor| -> Tensor {
        let w1 = w1.detach().requires_grad();
        let w2 = w2.detach().requires_grad();
        grad(&mlp_loss(&w1, &w2, &x, &y), &[w1], false)
            .unwrap()
            .remove(0)
    };
    let grad_w2_at = |w1: &Tensor| -> Tensor {
        let w1 = w1.detach().requires_grad();
        let w2 = w2.detach().requires_grad();
        grad(&mlp_loss(&w1, &w2, &x, &y), &[w2], false)
            .unwrap()
            .remove(0)
    };

    let loss = mlp_loss(&w1, &w2, &x, &y);
    let hv = hvp(&loss, std::slice::from_ref(&w1), std::slice::from_ref(&v)).unwrap();
    let shifted = |s: f64| w1.detach().add(&v.scale(s)).unwrap();
    let fd_hv: Vec<f64> = grad_w1_at(&shifted(H), &w2)
        .data()
        .iter()
        .zip(grad_w1_at(&shifted(-H), &w2).data())
        .map(|(p, m)| (p - m) / (2.0 * H))
        .collect();
    for (a, n) in hv[0].data().iter().zip(&fd_hv) {
        assert!(rel_err(*a, *n) < 1e-4, "hvp {a} vs {n}");
    }

    // u^T d2L/(dw2 dw1) = d/dt grad_w2 L(w1 + t u)
    let cross = cross_vjp(
        &loss,
        std::slice::from_ref(&w1),
        std::slice::from_ref(&w2),
        std::slice::from_ref(&u),
    )
    .unwrap();
    let moved = |s: f64| w1.detach().add(&u.scale(s)).unwrap();
    let fd_cross: Vec<f64> = grad_w2_at(&moved(H))
        .data()
        .iter()
        .zip(grad_w2_at(&moved(-H)).data())
        .map(|(p, m)| (p - m) / (2.0 * H))
        .collect();
    for (a, n) in cross[0].data().iter().zip(&fd_cross) {
        assert!(rel_err(*a, *n) < 1e-4, "cross {a} vs {n}");
    }
}

#[test]
fn second_order_products_exact_on_quadratics() {
    // f = 1/2 x^T A x + x^T B y with A symmetric
    let a = tensor(
        &[3, 3],
        vec![4.0, 1.0, 0.5, 1.0, 3.0, -0.25, 0.5, -0.25, 2.0],
    );
    let b = tensor(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, -3.0, 0.25]);
    let x = tensor(&[1, 3], vec![0.3, -0.7, 1.1]).requires_grad();
    let y = tensor(&[2, 1], vec![0.9, -0.4]).requires_grad();
    let f = x
        .matmul(&a)
        .unwrap()
        .matmul(&x.transpose().unwrap())
        .unwrap()
        .sum()
        .scale(0.5)
        .add(&x.matmul(&b).unwrap().matmul(&y).unwrap().sum())
        .unwrap();
    let v = [0.5, -1.0, 2.0];
    let hv = hvp(&f, std::slice::from_ref(&x), &[tensor(&[1, 3], v.to_vec())]).unwrap();
    let ad = a.data();
    for i in 0..3 {
        let expect: f64 = (0..3).map(|j| ad[i * 3 + j] * v[j]).sum();
        assert!((hv[0].data()[i] - expect).abs() < 1e-12);
    }
    let cross = cross_vjp(&f, &[x], &[y], &[tensor(&[1, 3], v.to_vec())]).unwrap();
    let bd = b.data();
    for k in 0..2 {
        let expect: f64 = (0..3).map(|i| bd[i * 2 + k] * v[i]).sum();
        assert!((cross[0].data()[k] - expect).abs() < 1e-12);
    }
}
