//! Retrieval evaluation (mAP, CMC) and embedding-space domain gaps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sjm::{mmd2, Kernel, SquareMatrix};
use crate::tensor::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub identity: usize,
    pub camera: usize,
}

/// Mean of precision at each relevant rank, or `None` without relevant items.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query: usize,
    /// `None` when the query had no valid positive and was excluded.
    pub ap: Option<f64>,
    /// 0-based rank of the first correct match.
    pub first_hit: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub map: f64,
    /// `cmc[k]` is the Rank-(k+1) accuracy.
    pub cmc: Vec<f64>,
    pub queries: Vec<QueryOutcome>,
    pub valid_queries: usize,
    pub excluded_queries: usize,
}

impl EvalResult {
    /// Rank-k accuracy (1-based k), saturating at the last computed rank.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }

    pub fn per_query_ap(&self) -> Vec<f64> {
        self.queries.iter().filter_map(|q| q.ap).collect()
    }
}

/// Ranks the gallery for every query by descending cosine similarity
/// (ties broken by gallery index), dropping gallery entries that share
/// both identity and camera with the query.
pub fn evaluate(
    query: &[Vec<f64>],
    query_meta: &[ItemMeta],
    gallery: &[Vec<f64>],
    gallery_meta: &[ItemMeta],
    max_rank: usize,
) -> Result<EvalResult> {
    if query.len() != query_meta.len() || gallery.len() != gallery_meta.len() {
        return Err(Error::invalid("evaluate: embeddings and metadata differ in length"));
    }
    if max_rank == 0 {
        return Err(Error::invalid("evaluate: max_rank must be positive"));
    }
    let mut outcomes = Vec::with_capacity(query.len());
    let mut hits_at = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    for (qi, (q, qm)) in query.iter().zip(query_meta).enumerate() {
        let mut order: Vec<(usize, f64)> = gallery
            .iter()
            .zip(gallery_meta)
            .enumerate()
            .filter(|(_, (_, gm))| !(gm.identity == qm.identity && gm.camera == qm.camera))
            .map(|(gi, (g, _))| (gi, dot(q, g)))
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let relevant: Vec<bool> = order
            .iter()
            .map(|&(gi, _)| gallery_meta[gi].identity == qm.identity)
            .collect();
        let ap = average_precision(&relevant);
        let first_hit = relevant.iter().position(|&r| r);
        if let (Some(ap), Some(r)) = (ap, first_hit) {
            valid += 1;
            ap_sum += ap;
            for h in hits_at.iter_mut().skip(r) {
                *h += 1;
            }
        }
        outcomes.push(QueryOutcome {
            query: qi,
            ap,
            first_hit,
        });
    }
    let denom = valid.max(1) as f64;
    Ok(EvalResult {
        map: if valid > 0 { ap_sum / denom } else { 0.0 },
        cmc: hits_at.iter().map(|&h| h as f64 / denom).collect(),
        queries: outcomes,
        valid_queries: valid,
        excluded_queries: query.len() - valid,
    })
}

/// Pairwise squared MMD between per-domain embedding sets.
pub fn domain_gap(groups: &[Vec<Vec<f64>>]) -> Result<SquareMatrix> {
    let k = groups.len();
    let mut m = SquareMatrix::zeros(k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = mmd2(&groups[i], &groups[j], Kernel::RbfMedian)?;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(m)
}

/// Mean of the off-diagonal entries.
pub fn mean_off_diagonal(m: &SquareMatrix) -> f64 {
    if m.n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..m.n {
        for j in 0..m.n {
            if i != j {
                s += m.get(i, j);
            }
        }
    }
    s / (m.n * (m.n - 1)) as f64
}
