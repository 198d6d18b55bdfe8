//! Finite-difference verification of every graph operation, plus
//! second-order checks.
//!
//! Each supported op is exercised inside a small composite objective (so the
//! chain rule is in play), on 20 seeded random instances, and its reverse-mode
//! gradient is compared against the central-difference oracle at 64-bit with
//! norm-wise relative tolerance 1e-4. Inputs are drawn away from kinks
//! (relu/clamp thresholds, sqrt at zero) — at a kink the oracle itself is
//! invalid, not the gradient.

use metareid_core::tensor::{
    abs_err_norm, finite_diff_grad, rel_err_norm, Graph, Tensor, Var, DEFAULT_FD_STEP,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: std::ops::Range<u64> = 0..20;
const TOL: f64 = 1e-4;
/// Locally flat objectives leave both gradients at noise level; below this
/// absolute difference the relative comparison is meaningless and agreement
/// is declared directly.
const FLAT_ATOL: f64 = 1e-9;

fn check_op(
    name: &str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: impl Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>,
) {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let g = Graph::new();
        let leaves: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let refs: Vec<&Var<f64>> = leaves.iter().collect();
        let auto = build(&g, &leaves).grad_values(&refs).unwrap();
        let fd = finite_diff_grad(&inputs, DEFAULT_FD_STEP, |pt| {
            let g = Graph::new();
            let leaves: Vec<Var<f64>> = pt.iter().map(|t| g.leaf(t.clone())).collect();
            build(&g, &leaves).item()
        })
        .unwrap();
        let err = rel_err_norm(&auto, &fd);
        let abs = abs_err_norm(&auto, &fd);
        assert!(
            err < TOL || abs < FLAT_ATOL,
            "{name}, seed {seed}: rel err {err:e} >= {TOL:e} (abs {abs:e})"
        );
    }
}

/// Entries bounded away from zero (for relu and division safety).
fn offset_randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, rng).map(|x: f64| x + 0.25 * x.signum() + if x == 0.0 { 0.25 } else { 0.0 })
}

#[test]
fn fd_add_same_shape() {
    check_op(
        "add",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[3, 4], r)],
        |_, l| l[0].add(&l[1]).square().mean(),
    );
}

#[test]
fn fd_add_leading_broadcast() {
    check_op(
        "add/bcast",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[4], r)],
        |_, l| l[0].add(&l[1]).square().mean(),
    );
}

#[test]
fn fd_add_scalar_broadcast() {
    check_op(
        "add/scalar",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[], r)],
        |_, l| l[0].add(&l[1]).square().mean(),
    );
}

#[test]
fn fd_sub_both_orders() {
    check_op(
        "sub",
        |r| vec![Tensor::randn(&[4], r), Tensor::randn(&[2, 4], r)],
        |_, l| l[0].sub(&l[1]).square().sum(),
    );
}

#[test]
fn fd_mul_same_and_broadcast() {
    check_op(
        "mul",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[3, 4], r)],
        |_, l| l[0].mul(&l[1]).mean(),
    );
    check_op(
        "mul/bcast",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[4], r)],
        |_, l| l[0].mul(&l[1]).square().mean(),
    );
}

#[test]
fn fd_div() {
    check_op(
        "div",
        |r| {
            vec![
                Tensor::randn(&[3, 4], r),
                // denominators in ±[0.5, inf): no zero crossing under ±h
                Tensor::randn(&[3, 4], r).map(|x: f64| x.signum() * (x.abs() + 0.5)),
            ]
        },
        |_, l| l[0].div(&l[1]).mean(),
    );
    check_op(
        "div/bcast",
        |r| {
            vec![
                Tensor::randn(&[3, 4], r),
                Tensor::randn(&[4], r).map(|x: f64| x.signum() * (x.abs() + 0.5)),
            ]
        },
        |_, l| l[0].div(&l[1]).square().mean(),
    );
}

#[test]
fn fd_scale_and_add_scalar() {
    check_op(
        "scale/add_scalar",
        |r| vec![Tensor::randn(&[5], r)],
        |_, l| l[0].scale(-1.7).add_scalar(0.3).square().sum(),
    );
}

#[test]
fn fd_matmul() {
    check_op(
        "matmul",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[4, 2], r)],
        |_, l| l[0].matmul(&l[1]).square().mean(),
    );
}

#[test]
fn fd_transpose() {
    check_op(
        "transpose",
        |r| vec![Tensor::randn(&[3, 4], r), Tensor::randn(&[3, 4], r)],
        |_, l| l[0].transpose().matmul(&l[1]).mean(),
    );
}

#[test]
fn fd_relu() {
    check_op(
        "relu",
        |r| vec![offset_randn(&[3, 4], r)],
        |_, l| l[0].relu().square().mean(),
    );
}

#[test]
fn fd_square_sqrt_exp() {
    check_op(
        "square",
        |r| vec![Tensor::randn(&[6], r)],
        |_, l| l[0].square().mean(),
    );
    check_op(
        "sqrt",
        |r| vec![Tensor::randn(&[6], r).map(|x: f64| x * x + 0.5)],
        |_, l| l[0].sqrt().sum(),
    );
    check_op(
        "exp",
        |r| vec![Tensor::randn(&[6], r)],
        |_, l| l[0].exp().mean(),
    );
}

#[test]
fn fd_clamp_min() {
    // Threshold at 0.0 with inputs bounded away from it.
    check_op(
        "clamp_min",
        |r| vec![offset_randn(&[8], r)],
        |_, l| l[0].clamp_min(0.0).square().sum(),
    );
}

#[test]
fn fd_reductions() {
    check_op("sum", |r| vec![Tensor::randn(&[3, 4], r)], |_, l| l[0].square().sum());
    check_op("mean", |r| vec![Tensor::randn(&[3, 4], r)], |_, l| l[0].square().mean());
    check_op(
        "sum_axis0",
        |r| vec![Tensor::randn(&[5, 3], r)],
        |_, l| l[0].sum_axis0().square().sum(),
    );
    check_op(
        "mean_axis0",
        |r| vec![Tensor::randn(&[5, 3], r)],
        |_, l| l[0].mean_axis0().square().sum(),
    );
    check_op(
        "sum_rows",
        |r| vec![Tensor::randn(&[4, 3], r)],
        |_, l| l[0].sum_rows().square().sum(),
    );
}

#[test]
fn fd_mul_rows() {
    check_op(
        "mul_rows",
        |r| vec![Tensor::randn(&[4, 3], r), Tensor::randn(&[4], r)],
        |_, l| l[0].mul_rows(&l[1]).square().mean(),
    );
}

#[test]
fn fd_logsumexp_rows() {
    check_op(
        "logsumexp_rows",
        |r| vec![Tensor::randn(&[4, 5], r)],
        |_, l| l[0].logsumexp_rows().square().mean(),
    );
}

#[test]
fn fd_pairwise_sq_dist() {
    // Random rows are almost surely well separated; the sqrt variant is the
    // distance actually used downstream, so check both.
    check_op(
        "pairwise_sq_dist",
        |r| vec![Tensor::randn(&[5, 3], r)],
        |_, l| l[0].pairwise_sq_dist().mean(),
    );
    check_op(
        "pairwise_dist_root",
        |r| vec![Tensor::randn(&[5, 3], r)],
        |g, l| {
            // Mask out the zero diagonal so sqrt stays away from its clamp.
            let b = 5;
            let mut m = vec![1.0; b * b];
            for i in 0..b {
                m[i * b + i] = 0.0;
            }
            let mask = g.constant(Tensor::new(vec![b, b], m));
            l[0].pairwise_sq_dist().sqrt().mul(&mask).mean()
        },
    );
}

#[test]
fn fd_concat_and_slice() {
    check_op(
        "concat_rows",
        |r| vec![Tensor::randn(&[2, 3], r), Tensor::randn(&[3, 3], r)],
        |_, l| l[0].concat_rows(&l[1]).square().mean(),
    );
    check_op(
        "slice_rows",
        |r| vec![Tensor::randn(&[5, 3], r)],
        |_, l| l[0].slice_rows(1, 3).square().sum(),
    );
}

#[test]
fn fd_composite_pipeline() {
    // A trunk-like composite touching most ops at once. Enough rows that
    // relu rarely kills a whole column (which would flatten the objective).
    check_op(
        "composite",
        |r| {
            vec![
                Tensor::randn(&[8, 3], r),
                Tensor::randn(&[3, 4], r),
                Tensor::randn(&[4], r).map(|x: f64| x + 0.5),
            ]
        },
        |_, l| {
            let h = l[0].matmul(&l[1]).add(&l[2]).relu();
            let mean = h.mean_axis0();
            let var = h.sub(&mean).square().mean_axis0();
            let norm = h.sub(&mean).div(&var.clamp_min(1e-10).sqrt());
            let d = norm.pairwise_sq_dist().add_scalar(1e-3).sqrt();
            d.mean().add(&norm.logsumexp_rows().mean())
        },
    );
}

// ─── second-order checks ───

#[test]
fn second_order_matches_quadratic_form() {
    // f(x) = x A x^T with x a row vector: Hessian is A + A^T, so
    // d/dx (grad f . v) = (A + A^T) v.
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 4;
        let a = Tensor::<f64>::randn(&[n, n], &mut rng);
        let x = Tensor::<f64>::randn(&[1, n], &mut rng);
        let v = Tensor::<f64>::randn(&[1, n], &mut rng);

        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let ac = g.constant(a.clone());
        let f = xv.matmul(&ac).matmul(&xv.transpose()).sum();
        let gx = &f.grad(&[&xv], true).unwrap()[0];
        let vc = g.constant(v.clone());
        let hv = gx.mul(&vc).sum().grad_values(&[&xv]).unwrap();

        for i in 0..n {
            let mut want = 0.0;
            for j in 0..n {
                want += (a.get2(i, j) + a.get2(j, i)) * v.get2(0, j);
            }
            let got = hv[0].get2(0, i);
            assert!(
                (got - want).abs() < 1e-8,
                "seed {seed}, coord {i}: {got} vs {want}"
            );
        }
    }
}

#[test]
fn second_order_matches_fd_of_gradient() {
    // Differentiate (grad f . v) and compare against finite differences of
    // the same contraction, for a nonlinear composite.
    let build = |_g: &Graph<f64>, x: &Var<f64>, w: &Var<f64>| {
        x.matmul(w).relu().square().logsumexp_rows().mean()
    };
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = offset_randn(&[3, 4], &mut rng);
        let w = Tensor::<f64>::randn(&[4, 3], &mut rng);
        let v = Tensor::<f64>::randn(&[4, 3], &mut rng);

        let contracted = |wt: &Tensor<f64>| -> f64 {
            let g = Graph::new();
            let xv = g.constant(x.clone());
            let wv = g.leaf(wt.clone());
            let f = build(&g, &xv, &wv);
            let gw = &f.grad(&[&wv], true).unwrap()[0];
            let vc = g.constant(v.clone());
            gw.mul(&vc).sum().item()
        };

        let g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.leaf(w.clone());
        let f = build(&g, &xv, &wv);
        let gw = &f.grad(&[&wv], true).unwrap()[0];
        let vc = g.constant(v.clone());
        let auto = gw.mul(&vc).sum().grad_values(&[&wv]).unwrap();

        let fd = finite_diff_grad(&[w.clone()], DEFAULT_FD_STEP, |pt| contracted(&pt[0]))
            .unwrap();
        let err = rel_err_norm(&auto, &fd);
        assert!(err < TOL, "seed {seed}: second-order rel err {err:e}");
    }
}

#[test]
fn gradient_is_linear_in_the_objective() {
    // grad(a f + b g) = a grad(f) + b grad(g), exactly up to float addition.
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x = Tensor::<f64>::randn(&[6], &mut rng);
        let (a, b) = (1.75, -0.4);

        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let f1 = xv.square().sum();
        let f2 = xv.exp().mean();
        let combined = f1.scale(a).add(&f2.scale(b));
        let gc = combined.grad_values(&[&xv]).unwrap();
        let g1 = f1.grad_values(&[&xv]).unwrap();
        let g2 = f2.grad_values(&[&xv]).unwrap();

        for i in 0..x.numel() {
            let want = a * g1[0].data()[i] + b * g2[0].data()[i];
            assert!(
                (gc[0].data()[i] - want).abs() < 1e-10,
                "seed {seed}: linearity violated at {i}"
            );
        }
    }
}

#[test]
fn third_order_still_differentiable() {
    // f = sum(x^4): f' = 4x^3, f'' v = 12 x^2 v, f''' applied twice -> 24 x v w.
    let g = Graph::new();
    let x = g.leaf(Tensor::new(vec![2], vec![1.5, -2.0]));
    let f = x.square().square().sum();
    let g1 = &f.grad(&[&x], true).unwrap()[0];
    let v = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]));
    let g2 = &g1.mul(&v).sum().grad(&[&x], true).unwrap()[0];
    let w = g.constant(Tensor::new(vec![2], vec![3.0, 1.0]));
    let g3 = g2.mul(&w).sum().grad_values(&[&x]).unwrap();
    for i in 0..2 {
        let xv = [1.5f64, -2.0][i];
        let want = 24.0 * xv * [1.0, 2.0][i] * [3.0, 1.0][i];
        assert!((g3[0].data()[i] - want).abs() < 1e-9);
    }
}
