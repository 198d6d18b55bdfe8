//! Training losses: batch-hard triplet on embeddings, cross-entropy on
//! classifier outputs, and their combination.
//!
//! The triplet loss mines, for every anchor row, its farthest same-id row
//! (hardest positive) and nearest other-id row (hardest negative) under
//! Euclidean distance, then averages `relu(d_ap - d_an + margin)` over
//! anchors. Mining happens on concrete distance values and is burned into the
//! graph as constant one-hot selection masks: gradients flow only through the
//! selected distances, which is the subgradient of the max/min selection and
//! stays differentiable at higher orders.
//!
//! Ties in mining resolve to the lowest row index (strict comparison,
//! ascending scan) so results are deterministic.

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, Var};

/// Default triplet margin.
pub const DEFAULT_MARGIN: f64 = 0.3;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("anchor {index} has no positive (no other row shares its id)")]
    AnchorWithoutPositive { index: usize },
    #[error("anchor {index} has no negative (all rows share its id)")]
    AnchorWithoutNegative { index: usize },
    #[error("label {label} at row {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("id labels ({labels}) do not match batch rows ({rows})")]
    LabelCount { labels: usize, rows: usize },
}

/// Which terms make up the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Cross-entropy plus triplet (the default).
    IdPlusTriplet,
    /// Triplet term alone.
    TripletOnly,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub margin: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: DEFAULT_MARGIN, mode: LossMode::IdPlusTriplet }
    }
}

/// The assembled objective with its constituent terms.
pub struct LossTerms<F> {
    pub total: Var<F>,
    /// Cross-entropy term; absent in [`LossMode::TripletOnly`].
    pub id: Option<Var<F>>,
    pub triplet: Var<F>,
}

/// Batch-hard triplet loss over embedding rows. Every anchor must have at
/// least one positive (another row with its id) and one negative.
pub fn triplet_batch_hard<F: Scalar>(
    embeddings: &Var<F>,
    ids: &[usize],
    margin: f64,
) -> Result<Var<F>, LossError> {
    let b = embeddings.shape()[0];
    if ids.len() != b {
        return Err(LossError::LabelCount { labels: ids.len(), rows: b });
    }

    let dist = embeddings.pairwise_sq_dist().sqrt();
    let dv = dist.value();

    // Mining on values; the graph sees the outcome as constant masks.
    let mut pos_mask = vec![F::zero(); b * b];
    let mut neg_mask = vec![F::zero(); b * b];
    for a in 0..b {
        let mut hardest_pos: Option<(usize, F)> = None;
        let mut hardest_neg: Option<(usize, F)> = None;
        for j in 0..b {
            if j == a {
                continue;
            }
            let d = dv.get2(a, j);
            if ids[j] == ids[a] {
                if hardest_pos.map_or(true, |(_, best)| d > best) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.map_or(true, |(_, best)| d < best) {
                hardest_neg = Some((j, d));
            }
        }
        let (pj, _) = hardest_pos.ok_or(LossError::AnchorWithoutPositive { index: a })?;
        let (nj, _) = hardest_neg.ok_or(LossError::AnchorWithoutNegative { index: a })?;
        pos_mask[a * b + pj] = F::one();
        neg_mask[a * b + nj] = F::one();
    }

    let g = embeddings.graph_handle();
    let p = g.constant(Tensor::new(vec![b, b], pos_mask));
    let n = g.constant(Tensor::new(vec![b, b], neg_mask));
    let d_ap = dist.mul(&p).sum_rows();
    let d_an = dist.mul(&n).sum_rows();
    Ok(d_ap.sub(&d_an).add_scalar(margin).relu().mean())
}

/// Mean cross-entropy of classifier outputs against integer id labels,
/// computed as `logsumexp(row) - row[label]` per row.
pub fn id_cross_entropy<F: Scalar>(logits: &Var<F>, ids: &[usize]) -> Result<Var<F>, LossError> {
    let shape = logits.shape();
    let (b, m) = (shape[0], shape[1]);
    if ids.len() != b {
        return Err(LossError::LabelCount { labels: ids.len(), rows: b });
    }
    let mut one_hot = vec![F::zero(); b * m];
    for (i, &y) in ids.iter().enumerate() {
        if y >= m {
            return Err(LossError::LabelOutOfRange { index: i, label: y, classes: m });
        }
        one_hot[i * m + y] = F::one();
    }
    let y = logits.graph_handle().constant(Tensor::new(vec![b, m], one_hot));
    let picked = logits.mul(&y).sum_rows();
    Ok(logits.logsumexp_rows().sub(&picked).mean())
}

/// Assemble the training objective from a forward pass's outputs.
pub fn total_loss<F: Scalar>(
    embeddings: &Var<F>,
    logits: &Var<F>,
    ids: &[usize],
    cfg: &LossConfig,
) -> Result<LossTerms<F>, LossError> {
    let triplet = triplet_batch_hard(embeddings, ids, cfg.margin)?;
    match cfg.mode {
        LossMode::IdPlusTriplet => {
            let id = id_cross_entropy(logits, ids)?;
            Ok(LossTerms { total: id.add(&triplet), id: Some(id), triplet })
        }
        LossMode::TripletOnly => Ok(LossTerms { total: triplet.clone(), id: None, triplet }),
    }
}
