//! Re-ranking baselines without learned parameters: query expansion and
//! side-information filters.
//!
//! All functions return indices into the initial candidate list. Query
//! expansion returns a permutation of it, filters return an order-preserving
//! subset.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::heading_difference;
use crate::loss::rank_by_score;
use crate::tensor::{self, Tensor2};
use crate::{Error, Real, Result};

pub const DEFAULT_N_QE: usize = 10;
pub const ALPHA_GRID: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Weight of the `r`-th retrieved descriptor (0-based) in the expanded query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QeWeighting {
    /// AQE: every descriptor weighs 1.
    Uniform,
    /// αQE: `max(s, 0)^α` with `s` the initial similarity.
    Similarity { alpha: f64 },
    /// AQEwD: `(n − r)/n`.
    Rank,
}

/// Scores of all candidates against the query expanded with the top-`n_qe`
/// candidates. `candidates` holds the candidate descriptors in initial order;
/// the query weighs 1. With `n_qe = 0` the initial scores are returned.
pub fn expanded_scores<T: Real>(
    query: &[T],
    candidates: &Tensor2<T>,
    initial_scores: &[f64],
    n_qe: usize,
    weighting: QeWeighting,
) -> Result<Vec<f64>> {
    let k = candidates.rows();
    if initial_scores.len() != k {
        return Err(Error::shape(
            "query expansion",
            candidates.shape(),
            (initial_scores.len(), 1),
        ));
    }
    if query.len() != candidates.cols() {
        return Err(Error::shape(
            "query expansion",
            (1, query.len()),
            candidates.shape(),
        ));
    }
    if n_qe == 0 || k == 0 {
        return Ok(initial_scores.to_vec());
    }
    let n = n_qe.min(k);
    let unit = |v: &[T]| {
        let u = tensor::l2_normalize(v);
        if u.degenerate {
            Err(Error::DegenerateNorm)
        } else {
            Ok(u.vector)
        }
    };
    let mut expanded = unit(query)?;
    let units: Vec<Vec<T>> = (0..k)
        .map(|i| unit(candidates.row(i)))
        .collect::<Result<_>>()?;
    for (r, u) in units.iter().take(n).enumerate() {
        let w = match weighting {
            QeWeighting::Uniform => 1.0,
            QeWeighting::Similarity { alpha } => libm::pow(initial_scores[r].max(0.0), alpha),
            QeWeighting::Rank => (n - r) as f64 / n as f64,
        };
        let w = T::from_f64(w);
        for (e, &x) in expanded.iter_mut().zip(u) {
            *e += w * x;
        }
    }
    let q = unit(&expanded)?;
    Ok(units.iter().map(|u| tensor::dot(&q, u).as_f64()).collect())
}

/// New candidate order after query expansion; see [`expanded_scores`].
/// Equal scores keep their initial order.
pub fn query_expansion<T: Real>(
    query: &[T],
    candidates: &Tensor2<T>,
    initial_scores: &[f64],
    n_qe: usize,
    weighting: QeWeighting,
) -> Result<Vec<usize>> {
    Ok(rank_by_score(&expanded_scores(
        query,
        candidates,
        initial_scores,
        n_qe,
        weighting,
    )?))
}

/// Keeps candidates whose heading differs from the query's by at most
/// `max_deg` degrees.
pub fn heading_filter(query_heading: f64, candidate_headings: &[f64], max_deg: f64) -> Vec<usize> {
    let max = max_deg.to_radians();
    candidate_headings
        .iter()
        .enumerate()
        .filter(|&(_, &h)| heading_difference(query_heading, h) <= max + 1e-12)
        .map(|(i, _)| i)
        .collect()
}

/// Keeps candidates that lie within the top `fraction` of the whole database
/// by radio similarity to the query.
///
/// `database_similarity[j]` is the radio similarity of database row `j`;
/// `candidates` are database rows in initial order.
pub fn radio_filter(
    candidates: &[usize],
    database_similarity: &[f64],
    fraction: f64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(alloc::format!(
            "radio filter fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = database_similarity.len();
    let keep = libm::ceil(fraction * n as f64) as usize;
    let order = rank_by_score(database_similarity);
    let mut kept = alloc::vec![false; n];
    for &j in order.iter().take(keep) {
        kept[j] = true;
    }
    candidates
        .iter()
        .enumerate()
        .filter_map(|(i, &row)| match kept.get(row) {
            Some(true) => Some(Ok(i)),
            Some(false) => None,
            None => Some(Err(Error::Data(alloc::format!(
                "candidate row {row} outside the database"
            )))),
        })
        .collect()
}
