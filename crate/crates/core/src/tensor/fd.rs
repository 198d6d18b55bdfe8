//! Central-difference gradient oracle.
//!
//! Deliberately knows nothing about the graph machinery: it only evaluates a
//! black-box scalar function at perturbed points. Gradient correctness
//! everywhere else in the crate is argued by agreement with this oracle at
//! 64-bit precision.

use super::{Tensor, TensorError};

/// Default perturbation step for 64-bit checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every element of every
/// tensor in `at`: `(f(x + h e_i) - f(x - h e_i)) / (2h)`.
///
/// Returns one gradient tensor per input tensor. Fails if any evaluation of
/// `f` is non-finite.
pub fn finite_diff_grad(
    at: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> Result<Vec<Tensor<f64>>, TensorError> {
    assert!(h > 0.0, "finite_diff_grad: step must be positive");
    let mut point: Vec<Tensor<f64>> = at.to_vec();
    let mut grads = Vec::with_capacity(at.len());
    for t in 0..at.len() {
        let mut gdata = vec![0.0f64; at[t].numel()];
        for i in 0..at[t].numel() {
            let orig = point[t].data()[i];
            point[t].data_mut()[i] = orig + h;
            let up = f(&point);
            point[t].data_mut()[i] = orig - h;
            let down = f(&point);
            point[t].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!(
                        "finite-difference evaluation at tensor {t}, element {i}"
                    ),
                });
            }
            gdata[i] = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(at[t].shape().to_vec(), gdata));
    }
    Ok(grads)
}

/// Detects non-smooth points where a finite-difference gradient check is
/// invalid. Returns the worst ratio, over `directions` random unit
/// directions, of the directional second difference
/// `|f(x+hv) - 2f(x) + f(x-hv)| / h²` measured at step `h / 10` to the one
/// measured at step `h`.
///
/// For a smooth function both measurements estimate the same curvature
/// `vᵀ∇²f v`, so the ratio is ≈ 1. At a kink — a subgradient point of
/// relu-like or max-like structure crossing `x` — the second difference
/// grows like `slope-jump / step` instead, so the ratio is ≈ 10. A
/// threshold of about 3 separates the two regimes with a wide margin;
/// callers should skip gradient checks at points scoring above it.
pub fn directional_kink_score<R: rand::Rng + ?Sized>(
    at: &[Tensor<f64>],
    h: f64,
    directions: usize,
    rng: &mut R,
    mut f: impl FnMut(&[Tensor<f64>]) -> f64,
) -> f64 {
    // Below this the coarse second difference is treated as "no curvature";
    // an essentially-linear function then scores ~0 and is accepted, which
    // is right: it is perfectly differentiable.
    const CURVATURE_FLOOR: f64 = 1e-2;
    let center = f(at);
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let mut v: Vec<Tensor<f64>> =
            at.iter().map(|t| Tensor::randn(t.shape(), rng)).collect();
        let norm: f64 = v.iter().map(|t| t.sq_norm_f64()).sum::<f64>().sqrt();
        for t in v.iter_mut() {
            for x in t.data_mut() {
                *x /= norm;
            }
        }
        let mut second_diff = |step: f64| {
            let shifted = |sign: f64| -> Vec<Tensor<f64>> {
                at.iter()
                    .zip(&v)
                    .map(|(t, d)| {
                        let mut m = t.clone();
                        for (x, dx) in m.data_mut().iter_mut().zip(d.data()) {
                            *x += sign * step * dx;
                        }
                        m
                    })
                    .collect()
            };
            let up = f(&shifted(1.0));
            let down = f(&shifted(-1.0));
            (up - 2.0 * center + down).abs() / (step * step)
        };
        let coarse = second_diff(h);
        let fine = second_diff(h / 10.0);
        worst = worst.max(fine / coarse.max(CURVATURE_FLOOR));
    }
    worst
}

/// Norm-wise absolute error `||a - b||` between two gradient sets.
///
/// Companion to [`rel_err_norm`] for near-zero gradients: when an objective
/// is locally flat, both gradients sit at noise level and a relative
/// comparison is meaningless; the caller should accept when this is tiny.
pub fn abs_err_norm(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "abs_err_norm: mismatched tensor counts");
    let mut diff_sq = 0.0;
    for (ta, tb) in a.iter().zip(b) {
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "abs_err_norm: mismatched shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            diff_sq += (x - y) * (x - y);
        }
    }
    diff_sq.sqrt()
}

/// Norm-wise relative error between two gradient sets:
/// `||a - b|| / max(||a||, ||b||)`, and 0 when both are zero.
pub fn rel_err_norm(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
    assert_eq!(a.len(), b.len(), "rel_err_norm: mismatched tensor counts");
    let mut diff_sq = 0.0;
    let mut na_sq = 0.0;
    let mut nb_sq = 0.0;
    for (ta, tb) in a.iter().zip(b) {
        assert_eq!(
            ta.shape(),
            tb.shape(),
            "rel_err_norm: mismatched shapes {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            diff_sq += (x - y) * (x - y);
            na_sq += x * x;
            nb_sq += y * y;
        }
    }
    let denom = na_sq.sqrt().max(nb_sq.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff_sq.sqrt() / denom
    }
}
