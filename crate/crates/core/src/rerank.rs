//! Re-ranking methods applied to whole sets of retrieval contexts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::affinity::SideInfoConfig;
use crate::baselines::{expanded_scores, heading_filter, radio_filter, QeWeighting, DEFAULT_N_QE};
use crate::dataset::{Dataset, Split};
use crate::loss::rank_by_score;
use crate::model::Model;
use crate::radio::{radio_descriptor, radio_similarity};
use crate::retrieval::RetrievalContext;
use crate::tensor::Tensor2;
use crate::train::rerank_contexts;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "method")]
pub enum Method {
    /// Initial order.
    None,
    Gcsa,
    Aqe {
        n_qe: usize,
    },
    #[serde(rename = "alphaqe")]
    AlphaQe {
        n_qe: usize,
        alpha: f64,
    },
    #[serde(rename = "aqewd")]
    AqeWd {
        n_qe: usize,
    },
    HeadingFilter {
        max_deg: f64,
    },
    RadioFilter {
        fraction: f64,
    },
}

impl Method {
    pub const AQE: Self = Self::Aqe { n_qe: DEFAULT_N_QE };
    pub const AQE_WD: Self = Self::AqeWd { n_qe: DEFAULT_N_QE };
    pub const HEADING_FILTER: Self = Self::HeadingFilter { max_deg: 30.0 };
    pub const RADIO_FILTER: Self = Self::RadioFilter { fraction: 0.1 };

    pub fn alpha_qe(alpha: f64) -> Self {
        Self::AlphaQe {
            n_qe: DEFAULT_N_QE,
            alpha,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Gcsa => "gcsa",
            Self::Aqe { .. } => "aqe",
            Self::AlphaQe { .. } => "alphaqe",
            Self::AqeWd { .. } => "aqewd",
            Self::HeadingFilter { .. } => "heading-filter",
            Self::RadioFilter { .. } => "radio-filter",
        }
    }
}

fn descriptors<T: Real>(ds: &Dataset, ids: &[u32]) -> Tensor2<T> {
    let mut m = Tensor2::zeros(ids.len(), ds.dim());
    for (r, &id) in ids.iter().enumerate() {
        m.row_mut(r).copy_from_slice(&ds.descriptor::<T>(id));
    }
    m
}

fn heading_of(ds: &Dataset, id: u32) -> Result<f64> {
    ds.records[id as usize]
        .pose
        .map(|p| p.heading)
        .ok_or_else(|| Error::Data(format!("record {id} has no heading")))
}

/// Re-ranked contexts, one per input context, holding the scores the method
/// ranked by. Filters keep the initial scores of the surviving candidates.
/// `model` is required for [`Method::Gcsa`] only.
pub fn rerank<T: Real>(
    method: Method,
    ds: &Dataset,
    side: &SideInfoConfig,
    contexts: &[RetrievalContext],
    model: Option<&Model<T>>,
) -> Result<Vec<RetrievalContext>> {
    let keep = |ctx: &RetrievalContext, kept: Vec<usize>| ctx.reordered(&kept, &ctx.scores);
    match method {
        Method::None => Ok(contexts.to_vec()),
        Method::Gcsa => {
            let model = model.ok_or_else(|| Error::Config("method gcsa needs a model".into()))?;
            rerank_contexts(model, ds, side, contexts)
        }
        Method::Aqe { n_qe } | Method::AlphaQe { n_qe, .. } | Method::AqeWd { n_qe } => {
            let weighting = match method {
                Method::Aqe { .. } => QeWeighting::Uniform,
                Method::AlphaQe { alpha, .. } => QeWeighting::Similarity { alpha },
                _ => QeWeighting::Rank,
            };
            contexts
                .iter()
                .map(|c| {
                    let cand = descriptors::<T>(ds, &c.candidates);
                    let scores = expanded_scores(
                        &ds.descriptor::<T>(c.query),
                        &cand,
                        &c.scores,
                        n_qe,
                        weighting,
                    )?;
                    Ok(c.reordered(&rank_by_score(&scores), &scores))
                })
                .collect()
        }
        Method::HeadingFilter { max_deg } => contexts
            .iter()
            .map(|c| {
                let q = heading_of(ds, c.query)?;
                let hs = c
                    .candidates
                    .iter()
                    .map(|&id| heading_of(ds, id))
                    .collect::<Result<Vec<_>>>()?;
                Ok(keep(c, heading_filter(q, &hs, max_deg)))
            })
            .collect(),
        Method::RadioFilter { fraction } => {
            let database = ds.rows(Split::Database);
            let descriptor = |id: u32, as_query: bool| {
                radio_descriptor(
                    &ds.readings(id, as_query, &side.radio),
                    &ds.registry,
                    side.radio.delta_max,
                )
                .0
            };
            let db_radio: Vec<Vec<f64>> = database
                .iter()
                .map(|&r| descriptor(r as u32, false))
                .collect();
            let mut row_of = BTreeMap::new();
            for (j, &r) in database.iter().enumerate() {
                row_of.insert(r as u32, j);
            }
            contexts
                .iter()
                .map(|c| {
                    if ds.readings(c.query, true, &side.radio).is_empty() {
                        return Err(Error::Data(format!(
                            "query {} has no radio readings",
                            c.query
                        )));
                    }
                    let q = descriptor(c.query, true);
                    let sims = db_radio
                        .iter()
                        .map(|d| radio_similarity(&q, d, side.radio.beta))
                        .collect::<Result<Vec<_>>>()?;
                    let rows = c
                        .candidates
                        .iter()
                        .map(|id| {
                            row_of.get(id).copied().ok_or_else(|| {
                                Error::Data(format!("candidate {id} is not a database image"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(keep(c, radio_filter(&rows, &sims, fraction)?))
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affinity::BlockConfig;
    use crate::radio::RadioConfig;
    use crate::retrieval::rankings;
    use crate::synth::{generate, WorldConfig};
    use alloc::collections::BTreeSet;

    fn setup() -> (crate::synth::World, SideInfoConfig, Vec<RetrievalContext>) {
        let w = generate(&WorldConfig {
            cells_per_axis: 6,
            images_per_cell: 3,
            session_length: 12,
            query_fraction: 0.2,
            seed: 3,
            ..WorldConfig::default()
        })
        .unwrap();
        let side = SideInfoConfig {
            fov: w.config.fov,
            radio: RadioConfig::default(),
            blocks: BlockConfig::VISUAL,
        };
        let (index, _) = w.dataset.database_index::<f32>().unwrap();
        let ctx = w
            .dataset
            .initial_contexts(&index, Split::Query, 15)
            .unwrap();
        (w, side, ctx)
    }

    #[test]
    fn baselines_return_permutations_or_subsets() {
        let (w, side, ctx) = setup();
        let ds = &w.dataset;
        for m in [
            Method::None,
            Method::AQE,
            Method::alpha_qe(3.0),
            Method::AQE_WD,
        ] {
            let out = rankings(&rerank::<f32>(m, ds, &side, &ctx, None).unwrap());
            for c in &ctx {
                let mut a = out[&c.query].clone();
                a.sort_unstable();
                let mut b = c.candidates.clone();
                b.sort_unstable();
                assert_eq!(a, b, "{}", m.name());
            }
        }
        let with_radio: Vec<RetrievalContext> = ctx
            .iter()
            .filter(|c| !ds.readings(c.query, true, &side.radio).is_empty())
            .cloned()
            .collect();
        assert!(!with_radio.is_empty());
        for m in [Method::HEADING_FILTER, Method::RADIO_FILTER] {
            let out = rankings(&rerank::<f32>(m, ds, &side, &with_radio, None).unwrap());
            for c in &with_radio {
                let set: BTreeSet<u32> = c.candidates.iter().copied().collect();
                let r = &out[&c.query];
                assert!(r.iter().all(|id| set.contains(id)));
                // filters keep the initial order
                let pos: Vec<usize> = r
                    .iter()
                    .map(|id| c.candidates.iter().position(|x| x == id).unwrap())
                    .collect();
                assert!(pos.windows(2).all(|p| p[0] < p[1]), "{}", m.name());
            }
        }
    }

    #[test]
    fn trivial_settings_keep_initial_order() {
        let (w, side, ctx) = setup();
        let none = rerank::<f32>(Method::None, &w.dataset, &side, &ctx, None).unwrap();
        let aqe0 = rerank::<f32>(Method::Aqe { n_qe: 0 }, &w.dataset, &side, &ctx, None).unwrap();
        let wide = rerank::<f32>(
            Method::HeadingFilter { max_deg: 180.0 },
            &w.dataset,
            &side,
            &ctx,
            None,
        )
        .unwrap();
        assert_eq!(none, ctx);
        assert_eq!(aqe0, ctx);
        assert_eq!(wide, ctx);
        let aqe = rerank::<f32>(Method::AQE, &w.dataset, &side, &ctx, None).unwrap();
        for c in &aqe {
            assert!(c.scores.windows(2).all(|s| s[0] >= s[1]));
        }
        let a0 = rerank::<f32>(Method::alpha_qe(0.0), &w.dataset, &side, &ctx, None).unwrap();
        assert_eq!(a0, aqe);
    }

    #[test]
    fn missing_inputs_are_errors() {
        let (mut w, side, ctx) = setup();
        assert!(matches!(
            rerank::<f32>(Method::Gcsa, &w.dataset, &side, &ctx, None),
            Err(Error::Config(_))
        ));
        let q = ctx[0].query as usize;
        w.dataset.records[q].radio.clear();
        assert!(matches!(
            rerank::<f32>(Method::RADIO_FILTER, &w.dataset, &side, &ctx[..1], None),
            Err(Error::Data(_))
        ));
        w.dataset.records[q].pose = None;
        assert!(matches!(
            rerank::<f32>(Method::HEADING_FILTER, &w.dataset, &side, &ctx[..1], None),
            Err(Error::Data(_))
        ));
    }
}
