//! Retrieval evaluation: ranked gallery search per query with mean average
//! precision and cumulative match characteristic curves.
//!
//! Distances are exact Euclidean, optionally after L2-normalizing each
//! embedding row. Gallery rankings order by distance with the gallery index
//! as a deterministic tiebreak. Queries with no same-id gallery entry are
//! skipped and counted rather than silently dropped or scored as zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding dimension mismatch: query {query}, gallery {gallery}")]
    DimMismatch { query: usize, gallery: usize },
    #[error("{what} has {labels} labels for {rows} rows")]
    LabelCount { what: &'static str, labels: usize, rows: usize },
    #[error("empty {0} set")]
    EmptySet(&'static str),
}

#[derive(Debug, Clone, Copy)]
pub struct EvalConfig {
    /// L2-normalize embedding rows before computing distances.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { normalize: true }
    }
}

/// Retrieval quality over one query/gallery split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean average precision over evaluated queries.
    pub map: f64,
    /// `cmc[k]`: fraction of evaluated queries whose first correct match
    /// appears within the top `k + 1` ranks. Monotone, ends at 1.
    pub cmc: Vec<f64>,
    /// Convenience: `cmc[0]`.
    pub rank1: f64,
    /// CMC at rank 5 (clamped to the gallery size when smaller).
    pub rank5: f64,
    /// CMC at rank 10 (clamped to the gallery size when smaller).
    pub rank10: f64,
    /// Average precision of each evaluated query, in query order; skipped
    /// queries contribute no entry.
    pub per_query_ap: Vec<f64>,
    pub evaluated_queries: usize,
    /// Queries with no same-id gallery entry.
    pub skipped_queries: usize,
    pub num_gallery: usize,
}

/// CMC value at rank `k`, clamping `k` to the curve length.
fn rank_at(cmc: &[f64], k: usize) -> f64 {
    cmc[k.min(cmc.len()) - 1]
}

/// Copy of `rows` with each row scaled to unit L2 norm. Zero-norm rows are
/// left untouched (with a warning) rather than poisoning the batch with NaN.
pub fn l2_normalize_rows(rows: &Tensor<f64>) -> Tensor<f64> {
    let (n, d) = (rows.rows(), rows.row_len());
    let mut out = rows.clone();
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        } else {
            log::warn!("row {i} has zero norm; leaving it unnormalized");
        }
    }
    out
}

/// Exact Euclidean distances between every query row and every gallery row:
/// `[Q, E] x [G, E] -> [Q, G]`.
pub fn distance_matrix(
    query: &Tensor<f64>,
    gallery: &Tensor<f64>,
    cfg: EvalConfig,
) -> Result<Tensor<f64>, EvalError> {
    if query.row_len() != gallery.row_len() {
        return Err(EvalError::DimMismatch { query: query.row_len(), gallery: gallery.row_len() });
    }
    let (q, g, e) = (query.rows(), gallery.rows(), query.row_len());
    let (qt, gt);
    let (query, gallery) = if cfg.normalize {
        qt = l2_normalize_rows(query);
        gt = l2_normalize_rows(gallery);
        (&qt, &gt)
    } else {
        (query, gallery)
    };
    let mut out = vec![0.0; q * g];
    for i in 0..q {
        let qi = &query.data()[i * e..(i + 1) * e];
        for j in 0..g {
            let gj = &gallery.data()[j * e..(j + 1) * e];
            let mut acc = 0.0;
            for p in 0..e {
                let d = qi[p] - gj[p];
                acc += d * d;
            }
            out[i * g + j] = acc.sqrt();
        }
    }
    Ok(Tensor::new(vec![q, g], out))
}

/// Rank the gallery for every query and score the retrieval.
pub fn evaluate(
    query_emb: &Tensor<f64>,
    query_ids: &[usize],
    gallery_emb: &Tensor<f64>,
    gallery_ids: &[usize],
    cfg: EvalConfig,
) -> Result<EvalReport, EvalError> {
    let (q, g) = (query_emb.rows(), gallery_emb.rows());
    if q == 0 {
        return Err(EvalError::EmptySet("query"));
    }
    if g == 0 {
        return Err(EvalError::EmptySet("gallery"));
    }
    if query_ids.len() != q {
        return Err(EvalError::LabelCount { what: "query", labels: query_ids.len(), rows: q });
    }
    if gallery_ids.len() != g {
        return Err(EvalError::LabelCount { what: "gallery", labels: gallery_ids.len(), rows: g });
    }
    let dist = distance_matrix(query_emb, gallery_emb, cfg)?;

    let mut ap_sum = 0.0;
    let mut per_query_ap = Vec::with_capacity(q);
    let mut first_match_counts = vec![0usize; g];
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (qi, &qid) in query_ids.iter().enumerate() {
        let row = &dist.data()[qi * g..(qi + 1) * g];
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_unstable_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));

        let mut hits = 0usize;
        let mut precision_sum = 0.0;
        let mut first_match: Option<usize> = None;
        for (rank0, &gj) in order.iter().enumerate() {
            if gallery_ids[gj] == qid {
                hits += 1;
                precision_sum += hits as f64 / (rank0 + 1) as f64;
                if first_match.is_none() {
                    first_match = Some(rank0);
                }
            }
        }
        match first_match {
            Some(rank0) => {
                evaluated += 1;
                let ap = precision_sum / hits as f64;
                ap_sum += ap;
                per_query_ap.push(ap);
                first_match_counts[rank0] += 1;
            }
            None => skipped += 1,
        }
    }
    if evaluated == 0 {
        return Err(EvalError::EmptySet("matchable query"));
    }

    let mut cmc = Vec::with_capacity(g);
    let mut cum = 0usize;
    for &c in &first_match_counts {
        cum += c;
        cmc.push(cum as f64 / evaluated as f64);
    }
    Ok(EvalReport {
        map: ap_sum / evaluated as f64,
        rank1: cmc[0],
        rank5: rank_at(&cmc, 5),
        rank10: rank_at(&cmc, 10),
        cmc,
        per_query_ap,
        evaluated_queries: evaluated,
        skipped_queries: skipped,
        num_gallery: g,
    })
}
