//! End-to-end gradient verification behind the `gradcheck` command.
//!
//! Three independent checks, each printing one PASS/FAIL line:
//!
//! - `ops`: a composite expression exercising every differentiable tensor
//!   operation, compared against central finite differences on seeded random
//!   inputs.
//! - `quadratic`: the scalar closed-form bilevel case, where the exact outer
//!   gradient at unit weight and inner step 0.1 is 1.81 and a first-order
//!   shortcut yields 1.9 — verifying the second-order term is really there.
//! - `meta`: the full composed training objective (inner gradient step,
//!   meta-test scoring, statistics mixing) on small seeded model instances
//!   at 64-bit, against finite differences over every parameter.
//!
//! Exit is 0 only if all checks pass; failures are listed with their worst
//! relative error.

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use metareid_core::data::{generate, sample_pk_batch, EpisodeBatch, GenSpec};
use metareid_core::losses::LossConfig;
use metareid_core::meta::{
    compose_objective, quadratic_meta_gradient, split_episode, EpisodeSplit, InnerStep,
    MlrDraws, MlrSource,
};
use metareid_core::model::{ModelConfig, ModelParams};
use metareid_core::tensor::{
    abs_err_norm, directional_kink_score, finite_diff_grad, rel_err_norm, Graph, Tensor, Var,
    DEFAULT_FD_STEP,
};

use crate::commands::CliError;

/// Agreement required of the meta-level finite-difference comparison; also
/// the default for `--tolerance`.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// The closed-form case is held to a much tighter bound than the
/// finite-difference checks (its only error is rounding); an even stricter
/// `--tolerance` still applies.
const QUADRATIC_TOLERANCE: f64 = 1e-10;

/// Near-zero gradients are compared absolutely instead of relatively.
const FLAT_ATOL: f64 = 1e-9;

/// Finite-difference step for the composed objective. The normalization
/// layer clamps tiny batch variances at 1e-10, which puts a regime boundary
/// at perturbation scale √1e-10 = 1e-5: a weight step h moves such a
/// variance by ~h². At 1e-7 the perturbed variance stays inside the clamped
/// region and central differences converge; rounding error is ~1e-8
/// relative.
const META_FD_STEP: f64 = 1e-7;

/// Two-scale curvature ratio above which an instance is treated as sitting
/// on a non-differentiable point and skipped (smooth functions score ≈ 1,
/// genuine kinks ≈ 10).
const KINK_SCORE_LIMIT: f64 = 3.0;

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Maximum accepted relative error for the finite-difference checks.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Offsets every generated instance; pass/fail should not move.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Verified instances required per finite-difference check.
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
}

struct CheckOutcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

// ── ops ──

/// Composite over four leaves touching every differentiable op. Returns the
/// scalar objective and the instance's distance from the nearest non-smooth
/// point (relu corners, the clamp threshold), so unlucky draws can be
/// rejected instead of producing a meaningless finite-difference comparison.
fn ops_objective(leaf: &[Var<f64>]) -> (Var<f64>, f64) {
    let (a, b, c, u) = (&leaf[0], &leaf[1], &leaf[2], &leaf[3]);

    let pre = a.matmul(b).add(c);
    let mut margin = f64::INFINITY;
    for &x in pre.value().data() {
        margin = margin.min(x.abs());
    }
    let n = pre.relu();
    let p = n.mul(c).sub(&c.scale(0.3)).neg().add_scalar(0.7);
    let q = p.div(&c.square().add_scalar(1.0));
    let r = q.mul_rows(u);
    let w = r.concat_rows(&q);

    let d2 = w.pairwise_sq_dist();
    let rows = d2.shape()[0];
    let vals = d2.value();
    for i in 0..rows {
        for j in 0..rows {
            if i != j {
                margin = margin.min((vals.get2(i, j) - 0.5).abs());
            }
        }
    }

    let term1 = w.logsumexp_rows().mean();
    let term2 = d2.clamp_min(0.5).sqrt().sum_rows().mean().scale(0.1);
    let term3 = w.slice_rows(1, 3).scale(0.2).exp().mean_axis0().sum().scale(0.05);
    let term4 = w.transpose().sum_axis0().mean().scale(0.3);
    (term1.add(&term2).add(&term3).add(&term4), margin)
}

fn ops_instance(seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        Tensor::randn(&[3, 4], &mut rng),
        Tensor::randn(&[4, 5], &mut rng),
        Tensor::randn(&[3, 5], &mut rng),
        Tensor::randn(&[3], &mut rng),
    ]
}

fn ops_check(tolerance: f64, base_seed: u64, instances: usize) -> CheckOutcome {
    let mut worst: f64 = 0.0;
    let mut done = 0usize;
    for sub in 0..(instances as u64) * 5 {
        if done == instances {
            break;
        }
        let ts = ops_instance(base_seed.wrapping_mul(1000).wrapping_add(sub));
        let g: Graph<f64> = Graph::new();
        let leaves: Vec<Var<f64>> = ts.iter().map(|t| g.leaf(t.clone())).collect();
        let (obj, margin) = ops_objective(&leaves);
        // The finite-difference step must not cross a relu corner or the
        // clamp threshold; reject draws that sit too close to either.
        if margin < 1e-3 {
            continue;
        }
        let leaf_refs: Vec<&Var<f64>> = leaves.iter().collect();
        let auto = match obj.grad_values(&leaf_refs) {
            Ok(gs) => gs,
            Err(e) => {
                return CheckOutcome {
                    name: "ops",
                    passed: false,
                    detail: format!("gradient computation failed: {e}"),
                }
            }
        };
        let fd = finite_diff_grad(&ts, DEFAULT_FD_STEP, |xs| {
            let g: Graph<f64> = Graph::new();
            let leaves: Vec<Var<f64>> = xs.iter().map(|t| g.leaf(t.clone())).collect();
            ops_objective(&leaves).0.item()
        })
        .expect("finite differences over matching shapes");
        worst = worst.max(rel_err_norm(&auto, &fd));
        done += 1;
    }
    if done < instances {
        return CheckOutcome {
            name: "ops",
            passed: false,
            detail: format!("only {done} smooth instances found; need {instances}"),
        };
    }
    CheckOutcome {
        name: "ops",
        passed: worst < tolerance,
        detail: format!("max rel err {worst:.2e} over {done} instances"),
    }
}

// ── quadratic ──

fn quadratic_check(tolerance: f64) -> CheckOutcome {
    let exact = quadratic_meta_gradient(0.1, true);
    let first_order = quadratic_meta_gradient(0.1, false);
    let bound = tolerance.min(QUADRATIC_TOLERANCE);
    let err = (exact - 1.81).abs().max((first_order - 1.9).abs());
    let separated = (exact - first_order).abs() > 1e-3;
    CheckOutcome {
        name: "quadratic",
        passed: err <= bound && separated,
        detail: format!(
            "outer gradient {exact} (want 1.81), first-order {first_order} (want 1.9), \
             max abs err {err:.1e}"
        ),
    }
}

// ── meta ──

/// A self-contained seeded verification instance: a small multi-domain
/// dataset, one episode batch with a valid domain split, and freshly
/// initialized model parameters.
struct MetaCase {
    params: ModelParams<f64>,
    batch: EpisodeBatch,
    split: EpisodeSplit,
}

const META_INNER_STEP: f64 = 0.05;

fn meta_case(seed: u64) -> MetaCase {
    let ds = generate(&GenSpec {
        num_ids: 6,
        num_domains: 3,
        rows_per_cell: 4,
        feature_dim: 6,
        severity: 1.0,
        noise_sigma: 0.3,
        seed,
    })
    .expect("valid generator spec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch = sample_pk_batch(&ds, 4, 4, &mut rng).expect("satisfiable batch");
    let split = split_episode(&batch, &mut rng).expect("splittable batch");
    let cfg = ModelConfig { input_dim: 6, hidden_dim: 8, embed_dim: 4, num_classes: 6 };
    MetaCase { params: ModelParams::init(cfg, &mut rng), batch, split }
}

/// Objective value at the given parameters with the mixing draws frozen, so
/// the function differentiated numerically is deterministic.
fn meta_objective(case: &MetaCase, tensors: &[Tensor<f64>], draws: Option<&MlrDraws<f64>>) -> f64 {
    let params = case.params.with_params(tensors);
    let g: Graph<f64> = Graph::new();
    let source = match draws {
        Some(d) => MlrSource::Frozen(d),
        None => MlrSource::Off,
    };
    compose_objective(
        &g,
        &params,
        &case.batch,
        Some(&case.split),
        source,
        InnerStep::Sgd { alpha: META_INNER_STEP },
        &LossConfig::default(),
        false,
    )
    .expect("objective composes")
    .outer
    .item()
}

/// Relu layers with zero-initialized biases can land a pre-activation
/// exactly on a corner, where reverse mode reports a one-sided subgradient
/// while central differences straddle it — a finite-difference comparison
/// only means something at differentiable points. Candidates are screened
/// with a two-scale curvature probe and skipped when it flags a kink.
fn meta_check(tolerance: f64, base_seed: u64, instances: usize) -> CheckOutcome {
    let max_candidates = (instances as u64) * 3;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut failures: Vec<u64> = Vec::new();
    for sub in 0..max_candidates {
        if checked == instances {
            break;
        }
        let seed = base_seed.wrapping_mul(1000).wrapping_add(sub);
        let case = meta_case(seed);

        // Draw the mixing randomness once at the base parameters, freeze it.
        let draws: Option<MlrDraws<f64>> = {
            let g: Graph<f64> = Graph::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(777));
            compose_objective(
                &g,
                &case.params,
                &case.batch,
                Some(&case.split),
                MlrSource::Rng { rng: &mut rng, force_lambda: None },
                InnerStep::Sgd { alpha: META_INNER_STEP },
                &LossConfig::default(),
                false,
            )
            .expect("objective composes")
            .draws
        };

        let base: Vec<Tensor<f64>> =
            case.params.param_list().iter().map(|t| (*t).clone()).collect();
        let mut probe_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f);
        let score = directional_kink_score(&base, 1e-4, 3, &mut probe_rng, |ts| {
            meta_objective(&case, ts, draws.as_ref())
        });
        if score > KINK_SCORE_LIMIT {
            skipped += 1;
            continue;
        }

        let g: Graph<f64> = Graph::new();
        let source = match &draws {
            Some(d) => MlrSource::Frozen(d),
            None => MlrSource::Off,
        };
        let composed = compose_objective(
            &g,
            &case.params,
            &case.batch,
            Some(&case.split),
            source,
            InnerStep::Sgd { alpha: META_INNER_STEP },
            &LossConfig::default(),
            false,
        )
        .expect("objective composes");
        let auto = composed
            .outer
            .grad_values(&composed.leaves.param_vars())
            .expect("gradients exist for every parameter");

        let fd = finite_diff_grad(&base, META_FD_STEP, |ts| {
            meta_objective(&case, ts, draws.as_ref())
        })
        .expect("finite differences over matching shapes");

        let rel = rel_err_norm(&auto, &fd);
        let abs = abs_err_norm(&auto, &fd);
        if !(rel < tolerance || abs < FLAT_ATOL) {
            failures.push(seed);
        }
        worst = worst.max(rel);
        checked += 1;
    }
    if checked < instances {
        return CheckOutcome {
            name: "meta",
            passed: false,
            detail: format!(
                "only {checked} differentiable instances among {max_candidates} candidates"
            ),
        };
    }
    CheckOutcome {
        name: "meta",
        passed: failures.is_empty(),
        detail: format!(
            "max rel err {worst:.2e} over {checked} instances ({skipped} kinked candidates \
             skipped){}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; over tolerance at seeds {failures:?}")
            }
        ),
    }
}

// ── driver ──

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    if !(args.tolerance > 0.0 && args.tolerance.is_finite()) {
        return Err(CliError::Usage(format!(
            "--tolerance must be finite and positive, got {}",
            args.tolerance
        )));
    }
    if args.instances == 0 {
        return Err(CliError::Usage("--instances must be positive".into()));
    }
    let outcomes = [
        ops_check(args.tolerance, args.seed, args.instances),
        quadratic_check(args.tolerance),
        meta_check(args.tolerance, args.seed, args.instances),
    ];
    for o in &outcomes {
        println!("check {}: {} ({})", o.name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "{} of {} checks failed: {}",
            failed.len(),
            outcomes.len(),
            failed.join(", ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_check_passes_at_default_tolerance() {
        let o = quadratic_check(DEFAULT_TOLERANCE);
        assert!(o.passed, "{}", o.detail);
    }

    #[test]
    fn ops_check_passes_quickly_on_a_few_instances() {
        let o = ops_check(DEFAULT_TOLERANCE, 0, 5);
        assert!(o.passed, "{}", o.detail);
    }

    #[test]
    fn meta_check_flags_absurd_tolerance() {
        let o = meta_check(1e-14, 0, 3);
        assert!(!o.passed, "a 1e-14 bound should not be attainable: {}", o.detail);
    }
}
