//! Synthetic multi-domain identity data: generation, CSV persistence, split
//! derivation, and the episodic P×K batch sampler.
//!
//! Every identity has a fixed prototype vector; every domain re-renders the
//! prototypes through its own corruption (per-coordinate scaling and shift on
//! the back half of the feature vector) plus per-row observation noise. The
//! front half of the coordinates is never corrupted, so a domain-invariant
//! signal always exists for a model to find. At corruption severity zero the
//! domains become identically distributed.
//!
//! Splits are a property of the data layout, not stored labels: the highest
//! domain id is held out for evaluation, and within it the first stored row
//! of each identity serves as the query, the rest as gallery. Loading a CSV
//! re-derives the same splits from the same layout.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::Tensor;

/// Per-row observation noise scale.
pub const NOISE_SIGMA: f64 = 0.3;

/// Batch sampling retries before giving up on the domain-diversity
/// constraint.
const SAMPLER_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has a single domain; need at least 2 (one is held out)")]
    SingleDomain,
    #[error("batch wants {requested} ids but the train split has {available}")]
    NotEnoughIds { requested: usize, available: usize },
    #[error("invalid batch shape: {0}")]
    BadBatchShape(&'static str),
    #[error("could not satisfy batch domain constraints after {attempts} attempts")]
    BatchConstraints { attempts: usize },
    #[error("invalid generator spec: {0}")]
    BadSpec(String),
}

/// Generation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub num_ids: usize,
    pub num_domains: usize,
    /// Rows per (identity, domain) cell.
    pub rows_per_cell: usize,
    pub feature_dim: usize,
    /// Corruption severity `s >= 0`; 0 makes all domains identically
    /// distributed.
    pub severity: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            num_ids: 32,
            num_domains: 4,
            rows_per_cell: 4,
            feature_dim: 32,
            severity: 1.0,
            noise_sigma: NOISE_SIGMA,
            seed: 0,
        }
    }
}

/// One observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub id: usize,
    pub domain: usize,
    pub features: Vec<f64>,
}

/// Rows plus everything derived from their layout: split membership and the
/// train-side (id, domain) grouping used by the sampler.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub feature_dim: usize,
    pub rows: Vec<Row>,
    /// `max(id) + 1`; classifier output width.
    pub num_ids: usize,
    /// Ascending distinct domains excluding the held-out one.
    pub train_domains: Vec<usize>,
    pub heldout_domain: usize,
    pub train_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub gallery_indices: Vec<usize>,
    /// Train-split row indices per (id, domain) cell, in stored order.
    groups: BTreeMap<(usize, usize), Vec<usize>>,
}

/// A sampled training batch: `P` identities × `K` rows each.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    /// `[P*K, feature_dim]` at full precision; narrowed at use.
    pub features: Tensor<f64>,
    pub ids: Vec<usize>,
    pub domains: Vec<usize>,
    pub row_indices: Vec<usize>,
}

impl Dataset {
    /// Derive splits and the sampler index from raw rows. The highest domain
    /// id becomes the held-out split; within it, the first stored row of each
    /// id is its query.
    pub fn from_rows(feature_dim: usize, rows: Vec<Row>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let mut domains: Vec<usize> = rows.iter().map(|r| r.domain).collect();
        domains.sort_unstable();
        domains.dedup();
        if domains.len() < 2 {
            return Err(DataError::SingleDomain);
        }
        let heldout_domain = *domains.last().unwrap();
        let train_domains: Vec<usize> =
            domains.iter().copied().filter(|&d| d != heldout_domain).collect();
        let num_ids = rows.iter().map(|r| r.id).max().unwrap() + 1;

        let mut train_indices = Vec::new();
        let mut query_indices = Vec::new();
        let mut gallery_indices = Vec::new();
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut seen_heldout_id: Vec<bool> = vec![false; num_ids];
        for (i, row) in rows.iter().enumerate() {
            if row.domain == heldout_domain {
                if seen_heldout_id[row.id] {
                    gallery_indices.push(i);
                } else {
                    seen_heldout_id[row.id] = true;
                    query_indices.push(i);
                }
            } else {
                train_indices.push(i);
                groups.entry((row.id, row.domain)).or_default().push(i);
            }
        }
        Ok(Dataset {
            feature_dim,
            rows,
            num_ids,
            train_domains,
            heldout_domain,
            train_indices,
            query_indices,
            gallery_indices,
            groups,
        })
    }

    /// Distinct ids present in the train split, ascending.
    pub fn train_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.groups.keys().map(|&(id, _)| id).collect();
        ids.dedup(); // BTreeMap keys are sorted by id first
        ids
    }

    /// Feature matrix for a set of row indices.
    pub fn features_of(&self, indices: &[usize]) -> Tensor<f64> {
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(&self.rows[i].features);
        }
        Tensor::new(vec![indices.len(), self.feature_dim], data)
    }

    pub fn ids_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.rows[i].id).collect()
    }
}

/// Draw the full synthetic corpus. Deterministic in `spec` (including the
/// seed); draw order is prototypes, then per-domain corruption parameters,
/// then per-row noise, so changing `rows_per_cell` never changes the domain
/// corruptions.
pub fn generate(spec: &GenSpec) -> Result<Dataset, DataError> {
    validate_spec(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let invariant = d / 2;

    let prototypes: Vec<Vec<f64>> = (0..spec.num_ids)
        .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
        .collect();

    // Per-domain corruption of the back half: scale interpolates from 1
    // toward a uniform draw in [0.5, 1.5) as severity rises, shift is a
    // scaled normal. At severity 0 both vanish.
    struct DomainCorruption {
        scale: Vec<f64>,
        shift: Vec<f64>,
    }
    let corruptions: Vec<DomainCorruption> = (0..spec.num_domains)
        .map(|_| {
            let scale: Vec<f64> = (invariant..d)
                .map(|_| 1.0 + spec.severity * (rng.random_range(0.5..1.5) - 1.0))
                .collect();
            let shift: Vec<f64> =
                (invariant..d).map(|_| spec.severity * normal(&mut rng)).collect();
            DomainCorruption { scale, shift }
        })
        .collect();

    let mut rows = Vec::with_capacity(spec.num_ids * spec.num_domains * spec.rows_per_cell);
    for (id, proto) in prototypes.iter().enumerate() {
        for (domain, corr) in corruptions.iter().enumerate() {
            for _ in 0..spec.rows_per_cell {
                let mut features = Vec::with_capacity(d);
                for (j, &p) in proto.iter().enumerate() {
                    let noisy = p + spec.noise_sigma * normal(&mut rng);
                    if j < invariant {
                        features.push(noisy);
                    } else {
                        let c = j - invariant;
                        features.push(corr.scale[c] * noisy + corr.shift[c]);
                    }
                }
                rows.push(Row { id, domain, features });
            }
        }
    }
    Dataset::from_rows(d, rows)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn validate_spec(spec: &GenSpec) -> Result<(), DataError> {
    let bad = |msg: String| Err(DataError::BadSpec(msg));
    if spec.num_ids < 2 {
        return bad(format!("number of identities must be at least 2, got {}", spec.num_ids));
    }
    if spec.num_domains < 2 {
        return bad(format!("number of domains must be at least 2, got {}", spec.num_domains));
    }
    if spec.rows_per_cell < 2 {
        return bad(format!("rows per cell must be at least 2, got {}", spec.rows_per_cell));
    }
    if spec.feature_dim == 0 {
        return bad("feature dimension must be positive".into());
    }
    if !(spec.severity >= 0.0 && spec.severity.is_finite()) {
        return bad(format!("severity must be finite and >= 0, got {}", spec.severity));
    }
    if !(spec.noise_sigma > 0.0 && spec.noise_sigma.is_finite()) {
        return bad(format!("noise sigma must be finite and > 0, got {}", spec.noise_sigma));
    }
    Ok(())
}

/// Write rows as CSV: header `id,domain,f0,...`, features printed with 17
/// significant digits so `f64` values round-trip exactly.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "id,domain")?;
    for j in 0..ds.feature_dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for row in &ds.rows {
        write!(w, "{},{}", row.id, row.domain)?;
        for v in &row.features {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a CSV written by [`save_csv`] (or produced externally with the same
/// header), re-deriving splits from the layout.
pub fn load_csv(path: &Path) -> Result<Dataset, DataError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or(DataError::Parse { line: 1, message: "missing header".into() })?;
    let header = header?;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 3 || cols[0] != "id" || cols[1] != "domain" {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header `id,domain,f0,...`, found `{header}`"),
        });
    }
    for (j, c) in cols[2..].iter().enumerate() {
        if *c != format!("f{j}") {
            return Err(DataError::Parse {
                line: 1,
                message: format!("feature column {} named `{c}`, expected `f{j}`", j + 2),
            });
        }
    }
    let dim = cols.len() - 2;

    let mut rows = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != dim + 2 {
            return Err(DataError::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", dim + 2, fields.len()),
            });
        }
        let id = fields[0].parse::<usize>().map_err(|e| DataError::Parse {
            line: line_no,
            message: format!("bad id `{}`: {e}", fields[0]),
        })?;
        let domain = fields[1].parse::<usize>().map_err(|e| DataError::Parse {
            line: line_no,
            message: format!("bad domain `{}`: {e}", fields[1]),
        })?;
        let mut features = Vec::with_capacity(dim);
        for f in &fields[2..] {
            let v = f.parse::<f64>().map_err(|e| DataError::Parse {
                line: line_no,
                message: format!("bad feature `{f}`: {e}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("non-finite feature `{f}`"),
                });
            }
            features.push(v);
        }
        rows.push(Row { id, domain, features });
    }
    Dataset::from_rows(dim, rows)
}

/// Sample a P×K batch from the train split: `p` distinct identities, `k` rows
/// each. Each identity's rows are spread over `min(#train domains, k/2)`
/// domains with at least 2 rows per touched domain, and the whole batch must
/// touch at least 2 domains (retried, then an error) so episodes can always
/// split by domain.
pub fn sample_pk_batch(
    ds: &Dataset,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeBatch, DataError> {
    if p < 2 {
        return Err(DataError::BadBatchShape("need at least 2 identities per batch"));
    }
    if k < 2 {
        return Err(DataError::BadBatchShape("need at least 2 rows per identity"));
    }
    let all_ids = ds.train_ids();
    if all_ids.len() < p {
        return Err(DataError::NotEnoughIds { requested: p, available: all_ids.len() });
    }

    for _ in 0..SAMPLER_RETRIES {
        let mut ids = all_ids.clone();
        ids.shuffle(rng);
        ids.truncate(p);

        let mut picked: Vec<usize> = Vec::with_capacity(p * k);
        for &id in &ids {
            let mut domains: Vec<usize> = ds
                .train_domains
                .iter()
                .copied()
                .filter(|&dm| ds.groups.contains_key(&(id, dm)))
                .collect();
            let nd = domains.len().min((k / 2).max(1));
            domains.shuffle(rng);
            domains.truncate(nd);
            let base = k / nd;
            let rem = k % nd;
            for (slot, &dm) in domains.iter().enumerate() {
                let need = base + usize::from(slot < rem);
                let cell = &ds.groups[&(id, dm)];
                let mut order: Vec<usize> = cell.clone();
                order.shuffle(rng);
                for t in 0..need {
                    // Wrap around when a cell is smaller than requested.
                    picked.push(order[t % order.len()]);
                }
            }
        }

        let mut batch_domains: Vec<usize> = picked.iter().map(|&i| ds.rows[i].domain).collect();
        batch_domains.sort_unstable();
        batch_domains.dedup();
        if batch_domains.len() < 2 && ds.train_domains.len() >= 2 {
            continue;
        }

        return Ok(EpisodeBatch {
            features: ds.features_of(&picked),
            ids: ds.ids_of(&picked),
            domains: picked.iter().map(|&i| ds.rows[i].domain).collect(),
            row_indices: picked,
        });
    }
    Err(DataError::BatchConstraints { attempts: SAMPLER_RETRIES })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> GenSpec {
        GenSpec {
            num_ids: 4,
            num_domains: 3,
            rows_per_cell: 3,
            feature_dim: 6,
            severity: 1.0,
            noise_sigma: NOISE_SIGMA,
            seed: 7,
        }
    }

    #[test]
    fn default_spec_row_counts() {
        let ds = generate(&GenSpec::default()).unwrap();
        assert_eq!(ds.rows.len(), 32 * 4 * 4);
        assert_eq!(ds.train_indices.len(), 32 * 3 * 4);
        assert_eq!(ds.heldout_domain, 3);
        assert_eq!(ds.train_domains, vec![0, 1, 2]);
        assert_eq!(ds.query_indices.len(), 32);
        assert_eq!(ds.gallery_indices.len(), 32 * 4 - 32);
        assert_eq!(ds.num_ids, 32);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a.rows, b.rows);
        let c = generate(&GenSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.rows, c.rows);
    }

    #[test]
    fn zero_severity_and_noise_collapse_domains() {
        // The generator requires strictly positive noise; a vanishing sigma
        // makes every row of an identity agree with its prototype to within
        // a few noise widths, across all domains.
        let spec =
            GenSpec { severity: 0.0, noise_sigma: 1e-12, ..small_spec() };
        let ds = generate(&spec).unwrap();
        for row in &ds.rows {
            let first = ds.rows.iter().find(|r| r.id == row.id).unwrap();
            for (a, b) in row.features.iter().zip(&first.features) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn front_coordinates_are_domain_invariant() {
        let spec = GenSpec { severity: 3.0, noise_sigma: 1e-12, ..small_spec() };
        let ds = generate(&spec).unwrap();
        let inv = spec.feature_dim / 2;
        for row in &ds.rows {
            let base = ds.rows.iter().find(|r| r.id == row.id).unwrap();
            for (a, b) in row.features[..inv].iter().zip(&base.features[..inv]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // The corrupted half really differs across domains.
        let r0 = &ds.rows[0];
        let other = ds.rows.iter().find(|r| r.id == r0.id && r.domain != r0.domain).unwrap();
        let diff: f64 = r0.features[inv..]
            .iter()
            .zip(&other.features[inv..])
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-3, "corrupted halves should differ, total diff {diff}");
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = generate(&small_spec()).unwrap();
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(ds.feature_dim, loaded.feature_dim);
        assert_eq!(ds.rows, loaded.rows);
        assert_eq!(ds.train_indices, loaded.train_indices);
        assert_eq!(ds.query_indices, loaded.query_indices);
        assert_eq!(ds.gallery_indices, loaded.gallery_indices);

        // Saving twice produces identical bytes.
        let path2 = dir.path().join("data2.csv");
        save_csv(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "id,domain,f0,f1\n0,0,1.0,2.0\n0,zero,1.0,2.0\n").unwrap();
        match load_csv(&path) {
            Err(DataError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("zero"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_wrong_field_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.csv");
        std::fs::write(&path, "id,domain,f0,f1\n0,0,1.0\n").unwrap();
        assert!(matches!(load_csv(&path), Err(DataError::Parse { line: 2, .. })));
    }

    #[test]
    fn query_is_first_heldout_row_per_id() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.csv");
        // Domains {0, 5}: 5 is held out. Id 1's first domain-5 row is line 5.
        std::fs::write(
            &path,
            "id,domain,f0\n0,0,0.1\n0,0,0.2\n0,5,0.3\n1,5,0.4\n1,5,0.5\n1,0,0.6\n0,5,0.7\n",
        )
        .unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.heldout_domain, 5);
        assert_eq!(ds.query_indices, vec![2, 3]);
        assert_eq!(ds.gallery_indices, vec![4, 6]);
        assert_eq!(ds.train_indices, vec![0, 1, 5]);
    }

    #[test]
    fn single_domain_is_rejected() {
        let rows = vec![
            Row { id: 0, domain: 0, features: vec![0.0] },
            Row { id: 1, domain: 0, features: vec![1.0] },
        ];
        assert!(matches!(Dataset::from_rows(1, rows), Err(DataError::SingleDomain)));
    }

    #[test]
    fn sampler_respects_batch_invariants() {
        let ds = generate(&GenSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let batch = sample_pk_batch(&ds, 16, 4, &mut rng).unwrap();
            assert_eq!(batch.ids.len(), 64);
            assert_eq!(batch.features.shape(), &[64, 32]);

            let mut per_id: BTreeMap<usize, usize> = BTreeMap::new();
            let mut per_cell: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            let mut domains: Vec<usize> = Vec::new();
            for (pos, &i) in batch.row_indices.iter().enumerate() {
                let row = &ds.rows[i];
                assert_ne!(row.domain, ds.heldout_domain, "train rows only");
                assert_eq!(row.id, batch.ids[pos]);
                *per_id.entry(row.id).or_default() += 1;
                *per_cell.entry((row.id, row.domain)).or_default() += 1;
                domains.push(row.domain);
            }
            assert_eq!(per_id.len(), 16);
            assert!(per_id.values().all(|&c| c == 4));
            assert!(per_cell.values().all(|&c| c >= 2), "{per_cell:?}");
            domains.sort_unstable();
            domains.dedup();
            assert!(domains.len() >= 2);
        }
    }

    #[test]
    fn sampler_id_marginals_are_uniform() {
        let ds = generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let trials = 10_000;
        let mut counts = vec![0usize; ds.num_ids];
        for _ in 0..trials {
            let batch = sample_pk_batch(&ds, 2, 4, &mut rng).unwrap();
            let mut ids = batch.ids.clone();
            ids.dedup();
            for id in ids {
                counts[id] += 1;
            }
        }
        // Each of 4 ids appears in a 2-of-4 draw with probability 1/2.
        let expected = trials as f64 * 2.0 / 4.0;
        for (id, &c) in counts.iter().enumerate() {
            let ratio = c as f64 / expected;
            assert!((0.8..1.2).contains(&ratio), "id {id}: {c} vs {expected}");
        }
    }

    #[test]
    fn sampler_rejects_impossible_requests() {
        let ds = generate(&small_spec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        assert!(matches!(
            sample_pk_batch(&ds, 5, 4, &mut rng),
            Err(DataError::NotEnoughIds { requested: 5, available: 4 })
        ));
        assert!(matches!(
            sample_pk_batch(&ds, 1, 4, &mut rng),
            Err(DataError::BadBatchShape(_))
        ));
        assert!(matches!(
            sample_pk_batch(&ds, 2, 1, &mut rng),
            Err(DataError::BadBatchShape(_))
        ));
    }

    #[test]
    fn generator_rejects_invalid_specs() {
        let cases: Vec<(GenSpec, &str)> = vec![
            (GenSpec { num_domains: 1, ..GenSpec::default() }, "domains"),
            (GenSpec { num_ids: 1, ..GenSpec::default() }, "identities"),
            (GenSpec { rows_per_cell: 1, ..GenSpec::default() }, "rows per cell"),
            (GenSpec { severity: -0.5, ..GenSpec::default() }, "severity"),
            (GenSpec { noise_sigma: 0.0, ..GenSpec::default() }, "noise"),
        ];
        for (spec, needle) in cases {
            match generate(&spec) {
                Err(DataError::BadSpec(msg)) => {
                    assert!(msg.contains(needle), "message {msg:?} should name {needle}")
                }
                other => panic!("expected BadSpec for {needle}, got {other:?}"),
            }
        }
    }
}
