//! Truncated retrieval metrics.
//!
//! `AP@k = (1/min(R, k)) Σ_{i≤k} rel_i · Prec@i` with `R` the number of
//! relevant database images of the query; `Recall@k` is the fraction of
//! queries with a relevant image in the top `k`. Queries without relevant
//! images are skipped and counted.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_KS: [usize; 4] = [1, 5, 10, 20];

pub fn average_precision_at_k(ranked: &[u32], relevant: &BTreeSet<u32>, k: usize) -> f64 {
    let r = relevant.len();
    if r == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / r.min(k) as f64
}

pub fn hit_at_k(ranked: &[u32], relevant: &BTreeSet<u32>, k: usize) -> bool {
    ranked.iter().take(k).any(|id| relevant.contains(id))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    /// `map[i]` is mAP@`ks[i]`.
    pub map: Vec<f64>,
    /// `recall[i]` is Recall@`ks[i]`.
    pub recall: Vec<f64>,
    /// Evaluated queries.
    pub queries: usize,
    /// Queries skipped for having no relevant image.
    pub skipped: usize,
}

impl MetricsReport {
    pub fn map_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.map[i])
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// Metrics of `rankings` (query id → ranked database ids).
pub fn evaluate(
    rankings: &BTreeMap<u32, Vec<u32>>,
    labels: &BTreeMap<u32, BTreeSet<u32>>,
    ks: &[usize],
) -> Result<MetricsReport> {
    if ks.contains(&0) {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    let mut map = alloc::vec![0.0; ks.len()];
    let mut recall = alloc::vec![0.0; ks.len()];
    let (mut queries, mut skipped) = (0usize, 0usize);
    for (q, ranked) in rankings {
        let Some(rel) = labels.get(q).filter(|r| !r.is_empty()) else {
            skipped += 1;
            continue;
        };
        queries += 1;
        for (i, &k) in ks.iter().enumerate() {
            map[i] += average_precision_at_k(ranked, rel, k);
            if hit_at_k(ranked, rel, k) {
                recall[i] += 1.0;
            }
        }
    }
    if queries == 0 {
        return Err(Error::NoPositives);
    }
    let n = queries as f64;
    Ok(MetricsReport {
        ks: ks.to_vec(),
        map: map.into_iter().map(|x| x / n).collect(),
        recall: recall.into_iter().map(|x| x / n).collect(),
        queries,
        skipped,
    })
}
