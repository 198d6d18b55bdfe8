//! First-order optimization utilities: AdamW with decoupled weight decay,
//! global-norm gradient clipping, and the warmup learning-rate schedule.
//!
//! The optimizer works on plain tensors outside the graph; gradients come in
//! as tensor values. A zero learning rate advances the moment estimates but
//! never writes to the parameters, so such steps leave them bitwise intact.

use crate::tensor::{Scalar, Tensor};

/// Adam/AdamW hyperparameters (the learning rate is passed per step).
#[derive(Debug, Clone)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient (applied as `p -= lr * wd * p`).
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(shapes: &[&Tensor<F>]) -> Self {
        AdamState {
            m: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: shapes.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Advance the moments with `grads` and return the bias-corrected Adam
    /// update direction `m_hat / (sqrt(v_hat) + eps)` per parameter. The
    /// caller decides what to do with it (apply, scale, or burn into a graph
    /// as a constant).
    pub fn direction(&mut self, grads: &[Tensor<F>], cfg: &OptimConfig) -> Vec<Tensor<F>> {
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.t += 1;
        let b1 = F::from_f64(cfg.beta1);
        let b2 = F::from_f64(cfg.beta2);
        let eps = F::from_f64(cfg.eps);
        let c1 = F::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let c2 = F::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.iter().enumerate() {
            assert_eq!(g.shape(), self.m[i].shape(), "gradient {i} shape mismatch");
            let mut dir = Tensor::zeros(g.shape());
            for (((m, v), &gk), d) in self.m[i]
                .data_mut()
                .iter_mut()
                .zip(self.v[i].data_mut().iter_mut())
                .zip(g.data())
                .zip(dir.data_mut().iter_mut())
            {
                *m = b1 * *m + (F::one() - b1) * gk;
                *v = b2 * *v + (F::one() - b2) * gk * gk;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *d = m_hat / (v_hat.sqrt() + eps);
            }
            out.push(dir);
        }
        out
    }
}

/// One AdamW step: moment update, bias-corrected direction, decoupled weight
/// decay. With `lr == 0` the moments still advance but parameters are not
/// touched at all.
pub fn adamw_step<F: Scalar>(
    state: &mut AdamState<F>,
    params: &mut [&mut Tensor<F>],
    grads: &[Tensor<F>],
    lr: f64,
    cfg: &OptimConfig,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    let dirs = state.direction(grads, cfg);
    if lr == 0.0 {
        return;
    }
    let lr_f = F::from_f64(lr);
    let wd = F::from_f64(cfg.weight_decay);
    for (p, d) in params.iter_mut().zip(&dirs) {
        for (pk, &dk) in p.data_mut().iter_mut().zip(d.data()) {
            *pk = *pk - lr_f * (dk + wd * *pk);
        }
    }
}

/// Euclidean norm of the concatenation of all gradient tensors, accumulated
/// at f64.
pub fn global_grad_norm<F: Scalar>(grads: &[Tensor<F>]) -> f64 {
    grads.iter().map(|g| g.sq_norm_f64()).sum::<f64>().sqrt()
}

/// Scale all gradients down to `max_norm` when their global norm exceeds it.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// Learning rate at `iter` (0-based): linear ramp from a tenth of `base` up
/// to `base` across `warmup_iters`, constant afterwards.
pub fn scheduled_lr(base: f64, iter: usize, warmup_iters: usize) -> f64 {
    if iter >= warmup_iters {
        return base;
    }
    let frac = iter as f64 / warmup_iters as f64;
    base * (0.1 + 0.9 * frac)
}
