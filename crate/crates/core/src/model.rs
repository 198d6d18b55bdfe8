//! Encoder model: MLP trunk, statistics-normalization layer, embedding and
//! classification heads.
//!
//! The trunk maps input features through two ReLU layers. Its output (the
//! "pre-norm" features) feeds a normalization layer that standardizes per
//! dimension — with batch statistics in training mode, with EMA running
//! statistics in eval mode — followed by a learned affine scale/shift. The
//! normalized features go through a linear embedding head (used for
//! retrieval) and a linear classifier (used for the identity loss).
//!
//! The forward pass is a pure function of (parameters, features, mode,
//! running statistics): repeated calls agree bitwise. Per-domain statistics
//! of the pre-norm features can be captured separately via
//! [`capture_domain_stats`]; training-time feature re-sampling is built on
//! those.

use rand::Rng;
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Variance floor inside the normalization layer. `sqrt` of it gives a
/// standard-deviation floor of 1e-5, so coincident batches cannot divide by
/// zero, while an already-standardized batch (variance 1) passes through
/// unchanged.
pub const NORM_VAR_FLOOR: f64 = 1e-10;

/// Floor applied to captured per-domain standard deviations.
pub const STD_FLOOR: f64 = 1e-5;

/// EMA momentum for running statistics: `r <- (1 - m) r + m batch`.
pub const RUNNING_STAT_MOMENTUM: f64 = 0.1;

/// Number of learnable parameter tensors (fixed order, see
/// [`ModelParams::param_names`]).
pub const PARAM_COUNT: usize = 8;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input feature dimension mismatch: expected {expected}, found {found}")]
    InputDim { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("domain {domain} contributes only {count} sample(s); need at least 2 to capture statistics")]
    DomainTooSmall { domain: usize, count: usize },
    #[error("domain labels ({labels}) do not match batch rows ({rows})")]
    DomainLabelCount { labels: usize, rows: usize },
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { input_dim: 32, hidden_dim: 64, embed_dim: 32, num_classes: 32 }
    }
}

/// All model state: learnable tensors plus running-statistic buffers.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub cfg: ModelConfig,
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub w_emb: Tensor<F>,
    pub w_cls: Tensor<F>,
    /// Running mean/variance of the pre-norm features (eval-mode statistics).
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
}

fn xavier_uniform<F: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::rand_uniform(&[fan_in, fan_out], -limit, limit, rng)
}

impl<F: Scalar> ModelParams<F> {
    /// Seeded initialization: weight matrices uniform in
    /// ±sqrt(6 / (fan_in + fan_out)) drawn in declaration order, biases and
    /// shift zero, scale one, running stats at (0, 1).
    pub fn init<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Self {
        let w1 = xavier_uniform(cfg.input_dim, cfg.hidden_dim, rng);
        let w2 = xavier_uniform(cfg.hidden_dim, cfg.hidden_dim, rng);
        let w_emb = xavier_uniform(cfg.hidden_dim, cfg.embed_dim, rng);
        let w_cls = xavier_uniform(cfg.embed_dim, cfg.num_classes, rng);
        ModelParams {
            b1: Tensor::zeros(&[cfg.hidden_dim]),
            b2: Tensor::zeros(&[cfg.hidden_dim]),
            gamma: Tensor::ones(&[cfg.hidden_dim]),
            beta: Tensor::zeros(&[cfg.hidden_dim]),
            running_mean: Tensor::zeros(&[cfg.hidden_dim]),
            running_var: Tensor::ones(&[cfg.hidden_dim]),
            cfg,
            w1,
            w2,
            w_emb,
            w_cls,
        }
    }

    /// Learnable tensor names in parameter order (checkpoint array names).
    pub fn param_names() -> [&'static str; PARAM_COUNT] {
        ["w1", "b1", "w2", "b2", "mlr_gamma", "mlr_beta", "w_emb", "w_cls"]
    }

    /// Learnable tensors in parameter order.
    pub fn param_list(&self) -> [&Tensor<F>; PARAM_COUNT] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.gamma, &self.beta, &self.w_emb,
            &self.w_cls,
        ]
    }

    pub fn param_list_mut(&mut self) -> [&mut Tensor<F>; PARAM_COUNT] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.gamma,
            &mut self.beta,
            &mut self.w_emb,
            &mut self.w_cls,
        ]
    }

    /// Copy of `self` with the learnable tensors replaced (buffers kept).
    /// `tensors` must follow parameter order.
    pub fn with_params(&self, tensors: &[Tensor<F>]) -> Self {
        assert_eq!(tensors.len(), PARAM_COUNT, "expected {PARAM_COUNT} tensors");
        let mut out = self.clone();
        for (dst, src) in out.param_list_mut().into_iter().zip(tensors) {
            assert_eq!(dst.shape(), src.shape(), "parameter shape changed");
            *dst = src.clone();
        }
        out
    }

    /// EMA update of the running statistics from one training batch
    /// (population variance, matching the normalization layer).
    pub fn update_running_stats(&mut self, batch_mean: &Tensor<F>, batch_var: &Tensor<F>) {
        let m = F::from_f64(RUNNING_STAT_MOMENTUM);
        let keep = F::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = keep * *r + m * b;
        }
    }

    /// Bind the learnable parameters into `graph` as differentiable leaves.
    pub fn bind(&self, graph: &Graph<F>) -> ModelVars<F> {
        ModelVars {
            cfg: self.cfg.clone(),
            w1: graph.leaf(self.w1.clone()),
            b1: graph.leaf(self.b1.clone()),
            w2: graph.leaf(self.w2.clone()),
            b2: graph.leaf(self.b2.clone()),
            gamma: graph.leaf(self.gamma.clone()),
            beta: graph.leaf(self.beta.clone()),
            w_emb: graph.leaf(self.w_emb.clone()),
            w_cls: graph.leaf(self.w_cls.clone()),
        }
    }
}

/// The model's learnable tensors as graph nodes. After an inner optimization
/// step these are computed nodes rather than leaves; the forward functions do
/// not care.
#[derive(Clone)]
pub struct ModelVars<F> {
    pub cfg: ModelConfig,
    pub w1: Var<F>,
    pub b1: Var<F>,
    pub w2: Var<F>,
    pub b2: Var<F>,
    pub gamma: Var<F>,
    pub beta: Var<F>,
    pub w_emb: Var<F>,
    pub w_cls: Var<F>,
}

impl<F: Scalar> ModelVars<F> {
    /// Vars in parameter order (mirrors [`ModelParams::param_list`]).
    pub fn param_vars(&self) -> [&Var<F>; PARAM_COUNT] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.gamma, &self.beta, &self.w_emb,
            &self.w_cls,
        ]
    }

    /// Replacement set in parameter order (used for inner-updated parameters).
    pub fn with_param_vars(&self, vars: Vec<Var<F>>) -> ModelVars<F> {
        assert_eq!(vars.len(), PARAM_COUNT, "expected {PARAM_COUNT} vars");
        let mut it = vars.into_iter();
        ModelVars {
            cfg: self.cfg.clone(),
            w1: it.next().unwrap(),
            b1: it.next().unwrap(),
            w2: it.next().unwrap(),
            b2: it.next().unwrap(),
            gamma: it.next().unwrap(),
            beta: it.next().unwrap(),
            w_emb: it.next().unwrap(),
            w_cls: it.next().unwrap(),
        }
    }
}

/// Which statistics the normalization layer uses.
#[derive(Clone, Copy)]
pub enum NormMode<'a, F> {
    /// Standardize with the batch's own statistics.
    Train,
    /// Standardize with stored running statistics.
    Eval { running_mean: &'a Tensor<F>, running_var: &'a Tensor<F> },
}

/// Everything a forward pass produces. All row counts are equal.
pub struct ForwardOutput<F> {
    /// Trunk output before normalization; the tensor domain statistics are
    /// captured from, and the injection point for mixed features.
    pub pre_norm: Var<F>,
    /// Post-normalization, post-affine features (exposed for tests).
    pub normalized: Var<F>,
    /// Retrieval embeddings.
    pub embeddings: Var<F>,
    /// Classifier outputs.
    pub logits: Var<F>,
    /// Batch statistics of the pre-norm features (training mode only);
    /// detached values for running-statistic updates.
    pub batch_mean: Option<Tensor<F>>,
    pub batch_var: Option<Tensor<F>>,
}

/// Per-domain statistics of pre-norm features: elementwise mean and
/// (floored) population standard deviation.
#[derive(Debug, Clone)]
pub struct DomainStats<F> {
    pub domain: usize,
    pub mean: Tensor<F>,
    pub std: Tensor<F>,
    pub count: usize,
}

/// Trunk only: two ReLU layers from input features to pre-norm features.
pub fn trunk_forward<F: Scalar>(vars: &ModelVars<F>, x: &Var<F>) -> Var<F> {
    let h1 = x.matmul(&vars.w1).add(&vars.b1).relu();
    h1.matmul(&vars.w2).add(&vars.b2).relu()
}

/// Normalization + affine + heads, from externally supplied pre-norm
/// features. In training mode the batch statistics are those of `pre_norm`
/// itself, so feeding a previous forward's pre-norm features reproduces that
/// forward's outputs exactly; feeding mixed features normalizes them as their
/// own batch. Gradients flow through `pre_norm` (and the statistics) freely.
pub fn head_forward<F: Scalar>(
    vars: &ModelVars<F>,
    pre_norm: &Var<F>,
    mode: NormMode<'_, F>,
) -> ForwardOutput<F> {
    let (xhat, bstats) = match mode {
        NormMode::Train => {
            let mean = pre_norm.mean_axis0();
            let centered = pre_norm.sub(&mean);
            let var = centered.square().mean_axis0();
            let std = var.clamp_min(NORM_VAR_FLOOR).sqrt();
            let xhat = centered.div(&std);
            (xhat, Some((mean.value(), var.value())))
        }
        NormMode::Eval { running_mean, running_var } => {
            let g = pre_norm.graph_handle();
            let mean = g.constant(running_mean.clone());
            let var = g.constant(running_var.clone());
            let std = var.clamp_min(NORM_VAR_FLOOR).sqrt();
            (pre_norm.sub(&mean).div(&std), None)
        }
    };
    let normalized = xhat.mul(&vars.gamma).add(&vars.beta);
    let embeddings = normalized.matmul(&vars.w_emb);
    let logits = embeddings.matmul(&vars.w_cls);
    let (batch_mean, batch_var) = match bstats {
        Some((m, v)) => (Some(m), Some(v)),
        None => (None, None),
    };
    ForwardOutput { pre_norm: pre_norm.clone(), normalized, embeddings, logits, batch_mean, batch_var }
}

/// Full forward pass. `x` must be `[B, input_dim]` with `B >= 1`.
pub fn forward<F: Scalar>(
    vars: &ModelVars<F>,
    x: &Var<F>,
    mode: NormMode<'_, F>,
) -> Result<ForwardOutput<F>, ModelError> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(ModelError::EmptyBatch);
    }
    if shape[1] != vars.cfg.input_dim {
        return Err(ModelError::InputDim { expected: vars.cfg.input_dim, found: shape[1] });
    }
    let pre_norm = trunk_forward(vars, x);
    Ok(head_forward(vars, &pre_norm, mode))
}

/// Per-domain mean and floored population std of pre-norm feature values.
/// Domains are processed in ascending label order; each domain present must
/// contribute at least 2 rows.
pub fn capture_domain_stats<F: Scalar>(
    pre_norm: &Tensor<F>,
    domains: &[usize],
) -> Result<Vec<DomainStats<F>>, ModelError> {
    let rows = pre_norm.rows();
    let dim = pre_norm.row_len();
    if domains.len() != rows {
        return Err(ModelError::DomainLabelCount { labels: domains.len(), rows });
    }
    let mut labels: Vec<usize> = domains.to_vec();
    labels.sort_unstable();
    labels.dedup();

    let floor = F::from_f64(STD_FLOOR);
    let mut out = Vec::with_capacity(labels.len());
    for &d in &labels {
        let members: Vec<usize> = (0..rows).filter(|&i| domains[i] == d).collect();
        if members.len() < 2 {
            return Err(ModelError::DomainTooSmall { domain: d, count: members.len() });
        }
        let n = F::from_f64(members.len() as f64);
        let mut mean = vec![F::zero(); dim];
        for &i in &members {
            for (m, &v) in mean.iter_mut().zip(&pre_norm.data()[i * dim..(i + 1) * dim]) {
                *m = *m + v;
            }
        }
        for m in mean.iter_mut() {
            *m = *m / n;
        }
        let mut var = vec![F::zero(); dim];
        for &i in &members {
            for (j, s) in var.iter_mut().enumerate() {
                let d = pre_norm.data()[i * dim + j] - mean[j];
                *s = *s + d * d;
            }
        }
        let std: Vec<F> = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > floor {
                    sd
                } else {
                    floor
                }
            })
            .collect();
        out.push(DomainStats {
            domain: d,
            mean: Tensor::new(vec![dim], mean),
            std: Tensor::new(vec![dim], std),
            count: members.len(),
        });
    }
    Ok(out)
}

/// Eval-mode embeddings and logits for plain `f64` feature rows, through a
/// throwaway graph. Used by retrieval evaluation.
pub fn embed_for_eval<F: Scalar>(
    params: &ModelParams<F>,
    features: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>), ModelError> {
    let graph: Graph<F> = Graph::new();
    let vars = params.bind(&graph);
    let x = graph.constant(Tensor::from_f64_slice(features.shape(), features.to_f64().data()));
    let out = forward(
        &vars,
        &x,
        NormMode::Eval { running_mean: &params.running_mean, running_var: &params.running_var },
    )?;
    Ok((out.embeddings.value().to_f64(), out.logits.value().to_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig { input_dim: 6, hidden_dim: 8, embed_dim: 4, num_classes: 5 }
    }

    fn forward_values(
        params: &ModelParams<f64>,
        x: &Tensor<f64>,
        train: bool,
    ) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let g = Graph::new();
        let vars = params.bind(&g);
        let xv = g.constant(x.clone());
        let mode = if train {
            NormMode::Train
        } else {
            NormMode::Eval {
                running_mean: &params.running_mean,
                running_var: &params.running_var,
            }
        };
        let out = forward(&vars, &xv, mode).unwrap();
        (out.normalized.value(), out.embeddings.value(), out.logits.value())
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = ModelParams::<f64>::init(small_cfg(), &mut r1);
        let b = ModelParams::<f64>::init(small_cfg(), &mut r2);
        assert_eq!(a.w1, b.w1);
        assert_eq!(a.w_cls, b.w_cls);
        let limit = (6.0 / (6 + 8) as f64).sqrt();
        assert!(a.w1.data().iter().all(|v| v.abs() <= limit));
        assert!(a.b1.data().iter().all(|&v| v == 0.0));
        assert!(a.gamma.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn forward_shapes_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        let x = Tensor::randn(&[7, 6], &mut rng);
        let (n1, e1, l1) = forward_values(&params, &x, true);
        let (n2, e2, l2) = forward_values(&params, &x, true);
        assert_eq!(n1.shape(), &[7, 8]);
        assert_eq!(e1.shape(), &[7, 4]);
        assert_eq!(l1.shape(), &[7, 5]);
        // bitwise repeatability
        assert_eq!(n1, n2);
        assert_eq!(e1, e2);
        assert_eq!(l1, l2);
    }

    #[test]
    fn train_mode_standardizes_before_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        // gamma = 1, beta = 0 at init, so `normalized` is the standardized
        // tensor itself.
        let x = Tensor::randn(&[16, 6], &mut rng);
        let (norm, _, _) = forward_values(&params, &x, true);
        let (b, d) = (16, 8);
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|i| norm.get2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
            assert!(mean.abs() < 1e-5, "column {j} mean {mean}");
            // Dead relu columns are all-zero: variance clamps to ~0 output.
            assert!(var < 1e-4 || (var - 1.0).abs() < 1e-4, "column {j} var {var}");
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        let g = Graph::new();
        let vars = params.bind(&g);
        // Build a standardized batch directly at the pre-norm interface.
        let raw = Tensor::<f64>::randn(&[12, 8], &mut rng);
        let (b, d) = (12, 8);
        let mut std_data = vec![0.0; b * d];
        for j in 0..d {
            let col: Vec<f64> = (0..b).map(|i| raw.get2(i, j)).collect();
            let mean = col.iter().sum::<f64>() / b as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
            for i in 0..b {
                std_data[i * d + j] = (raw.get2(i, j) - mean) / var.sqrt();
            }
        }
        let pre = g.constant(Tensor::new(vec![b, d], std_data.clone()));
        let out = head_forward(&vars, &pre, NormMode::Train);
        let norm = out.normalized.value();
        for (got, want) in norm.data().iter().zip(&std_data) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn coincident_rows_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        let row: Vec<f64> = (0..6).map(|i| i as f64 * 0.1).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let x = Tensor::new(vec![4, 6], data);
        let (norm, emb, logits) = forward_values(&params, &x, true);
        assert!(norm.all_finite());
        assert!(emb.all_finite());
        assert!(logits.all_finite());
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        let x = Tensor::randn(&[5, 6], &mut rng);
        let (_, e_before, _) = forward_values(&params, &x, false);
        params.update_running_stats(
            &Tensor::full(&[8], 0.3),
            &Tensor::full(&[8], 2.0),
        );
        let (_, e_after, _) = forward_values(&params, &x, false);
        assert_ne!(e_before, e_after);
        // EMA arithmetic: 0.9 * 0 + 0.1 * 0.3 etc.
        assert!((params.running_mean.data()[0] - 0.03).abs() < 1e-15);
        assert!((params.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn capture_stats_small_case() {
        // Two domains; hand-checked mean and population std.
        let pre = Tensor::new(
            vec![4, 2],
            vec![
                1.0, 0.0, //
                3.0, 0.0, //
                10.0, 4.0, //
                14.0, 8.0,
            ],
        );
        let stats = capture_domain_stats(&pre, &[0, 0, 2, 2]).unwrap();
        assert_eq!(stats.len(), 2);
        assert_eq!(stats[0].domain, 0);
        assert_eq!(stats[0].count, 2);
        assert_eq!(stats[0].mean.data(), &[2.0, 0.0]);
        assert_eq!(stats[0].std.data()[0], 1.0); // pop std of {1, 3}
        assert_eq!(stats[0].std.data()[1], STD_FLOOR); // floored
        assert_eq!(stats[1].mean.data(), &[12.0, 6.0]);
        assert_eq!(stats[1].std.data(), &[2.0, 2.0]);
    }

    #[test]
    fn capture_stats_rejects_singleton_domain() {
        let pre = Tensor::<f64>::randn(&[3, 2], &mut ChaCha8Rng::seed_from_u64(9));
        let err = capture_domain_stats(&pre, &[0, 0, 1]).unwrap_err();
        assert!(matches!(err, ModelError::DomainTooSmall { domain: 1, count: 1 }));
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        let g = Graph::new();
        let vars = params.bind(&g);
        let x = g.constant(Tensor::randn(&[3, 5], &mut rng));
        assert!(matches!(
            forward(&vars, &x, NormMode::Train),
            Err(ModelError::InputDim { expected: 6, found: 5 })
        ));
    }

    #[test]
    fn head_forward_reproduces_full_forward() {
        // Feeding a forward's own pre-norm features back through the head
        // gives identical embeddings/logits (the mixing identity at λ = 1).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ModelParams::<f64>::init(small_cfg(), &mut rng);
        let g = Graph::new();
        let vars = params.bind(&g);
        let x = g.constant(Tensor::randn(&[6, 6], &mut rng));
        let full = forward(&vars, &x, NormMode::Train).unwrap();
        let replay = head_forward(&vars, &full.pre_norm, NormMode::Train);
        assert_eq!(full.embeddings.value(), replay.embeddings.value());
        assert_eq!(full.logits.value(), replay.logits.value());
    }
}
