//! Exhaustive cosine top-K retrieval.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::tensor::{self, Tensor2};
use crate::{Error, Real, Result};

/// A query with its ranked top-K database candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalContext {
    pub query: u32,
    pub candidates: Vec<u32>,
    pub scores: Vec<f64>,
}

impl RetrievalContext {
    /// Context holding the candidates at positions `order`, with
    /// `scores[i]` the new score of the candidate at position `i`.
    pub fn reordered(&self, order: &[usize], scores: &[f64]) -> Self {
        Self {
            query: self.query,
            candidates: order.iter().map(|&i| self.candidates[i]).collect(),
            scores: order.iter().map(|&i| scores[i]).collect(),
        }
    }
}

/// Candidate ids per query.
pub fn rankings(contexts: &[RetrievalContext]) -> BTreeMap<u32, Vec<u32>> {
    contexts
        .iter()
        .map(|c| (c.query, c.candidates.clone()))
        .collect()
}

/// Unit-normalized database descriptors with their record ids.
#[derive(Clone, Debug)]
pub struct DescriptorIndex<T> {
    ids: Vec<u32>,
    unit: Tensor2<T>,
}

/// Descending score, then ascending id.
pub fn by_score_then_id<T: Real>(a: (u32, T), b: (u32, T)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then(a.0.cmp(&b.0))
}

impl<T: Real> DescriptorIndex<T> {
    /// Rows of `descriptors` belong to `ids`. Zero rows are rejected.
    pub fn new(ids: Vec<u32>, descriptors: &Tensor2<T>) -> Result<Self> {
        if ids.len() != descriptors.rows() {
            return Err(Error::shape("index", descriptors.shape(), (ids.len(), 1)));
        }
        let mut unit = Tensor2::zeros(descriptors.rows(), descriptors.cols());
        for (r, id) in ids.iter().enumerate() {
            let (_, degenerate) = tensor::normalize_into(descriptors.row(r), unit.row_mut(r));
            if degenerate {
                return Err(Error::Data(alloc::format!(
                    "record {id} has a zero descriptor"
                )));
            }
        }
        Ok(Self { ids, unit })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.unit.cols()
    }

    /// Unit descriptor of row `i`.
    pub fn unit(&self, i: usize) -> &[T] {
        self.unit.row(i)
    }

    /// Cosine similarity of every database row to `query`.
    pub fn scores(&self, query: &[T]) -> Result<Vec<T>> {
        if query.len() != self.dim() {
            return Err(Error::shape("search", (1, query.len()), self.unit.shape()));
        }
        let q = tensor::l2_normalize(query);
        if q.degenerate {
            return Err(Error::DegenerateNorm);
        }
        Ok((0..self.len())
            .map(|i| tensor::dot(&q.vector, self.unit.row(i)))
            .collect())
    }

    /// Top-`k` rows by cosine to `query` as `(row, score)`, skipping rows for
    /// which `exclude` holds. `k` is clipped to the number of eligible rows.
    pub fn search(
        &self,
        query: &[T],
        k: usize,
        exclude: impl Fn(usize) -> bool,
    ) -> Result<Vec<(usize, T)>> {
        let scores = self.scores(query)?;
        let mut hits: Vec<(usize, T)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(i, _)| !exclude(i))
            .collect();
        if k < hits.len() {
            let ids = &self.ids;
            hits.select_nth_unstable_by(k, |a, b| {
                by_score_then_id((ids[a.0], a.1), (ids[b.0], b.1))
            });
            hits.truncate(k);
        } else if k > hits.len() {
            log::warn!(
                "requested top-{k} but only {} database images are eligible",
                hits.len()
            );
        }
        hits.sort_by(|a, b| by_score_then_id((self.ids[a.0], a.1), (self.ids[b.0], b.1)));
        Ok(hits)
    }

    /// Top-`k` context for query `id`.
    pub fn retrieve(
        &self,
        id: u32,
        query: &[T],
        k: usize,
        exclude: impl Fn(usize) -> bool,
    ) -> Result<RetrievalContext> {
        let hits = self.search(query, k, exclude)?;
        Ok(RetrievalContext {
            query: id,
            candidates: hits.iter().map(|&(i, _)| self.ids[i]).collect(),
            scores: hits.iter().map(|&(_, s)| s.as_f64()).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2<f64> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor2::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn query_in_database_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let db = random(&mut rng, 50, 8);
        let idx = DescriptorIndex::new((0..50).collect(), &db).unwrap();
        let hits = idx.search(db.row(17), 5, |_| false).unwrap();
        assert_eq!(hits[0].0, 17);
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert!(hits.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn orthogonal_decoys_rank_last() {
        let db = Tensor2::from_rows(&[[0.0, 1.0], [0.0, -3.0], [2.0, 0.5]]).unwrap();
        let idx = DescriptorIndex::new(alloc::vec![10, 11, 12], &db).unwrap();
        let ctx = idx.retrieve(99, &[1.0, 0.0], 3, |_| false).unwrap();
        assert_eq!(ctx.candidates, alloc::vec![12, 10, 11]);
        assert_eq!(ctx.scores[1], 0.0);
    }

    #[test]
    fn ties_break_by_id_and_exclusion_applies() {
        let db = Tensor2::filled(4, 2, 1.0f64);
        let idx = DescriptorIndex::new(alloc::vec![7, 3, 5, 1], &db).unwrap();
        let ctx = idx.retrieve(0, &[1.0, 1.0], 3, |r| r == 3).unwrap();
        assert_eq!(ctx.candidates, alloc::vec![3, 5, 7]);
        assert_eq!(idx.search(&[1.0, 1.0], 10, |_| false).unwrap().len(), 4);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let db = random(&mut rng, 300, 16);
            let q: alloc::vec::Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let idx = DescriptorIndex::new((0..300).collect(), &db).unwrap();
            let got: alloc::vec::Vec<usize> = idx
                .search(&q, 25, |_| false)
                .unwrap()
                .iter()
                .map(|h| h.0)
                .collect();
            let mut oracle: alloc::vec::Vec<(usize, f64)> = (0..300)
                .map(|i| (i, tensor::cosine_sim(&q, db.row(i)).unwrap()))
                .collect();
            oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let want: alloc::vec::Vec<usize> = oracle[..25].iter().map(|h| h.0).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn zero_descriptor_is_a_data_error() {
        let db = Tensor2::zeros(2, 3);
        assert!(matches!(
            DescriptorIndex::<f64>::new(alloc::vec![1, 2], &db),
            Err(Error::Data(_))
        ));
    }
}
