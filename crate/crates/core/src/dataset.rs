//! In-memory datasets and retrieval contexts over them.
//!
//! Record ids equal row indices into the descriptor matrix.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::{side_affinity, NodeSide, SideInfoConfig};
use crate::geometry::{fov_overlap, FovConfig, Pose};
use crate::model::ContextInput;
use crate::radio::{
    drop_readings, radio_descriptor, window_readings, EndpointRegistry, RadioConfig, RadioReading,
};
use crate::retrieval::{DescriptorIndex, RetrievalContext};
use crate::tensor::Tensor2;
use crate::{Error, Real, Result};

/// Positional affinity above which a database image is relevant.
pub const RELEVANCE_THRESHOLD: f64 = 1.0 / 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Database,
    /// Queries used for checkpoint selection.
    Val,
    Query,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u32,
    pub split: Split,
    pub session: u32,
    #[serde(default)]
    pub pose: Option<Pose>,
    /// Seconds.
    pub timestamp: f64,
    /// Radio readings near the image timestamp, as recorded.
    #[serde(default)]
    pub radio: Vec<RadioReading>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<Record>,
    /// `records.len() × D`.
    pub descriptors: Tensor2<f32>,
    pub registry: EndpointRegistry,
    /// Query id → relevant database ids.
    pub labels: BTreeMap<u32, BTreeSet<u32>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.descriptors.rows() != self.records.len() {
            return Err(Error::Data(format!(
                "{} records but {} descriptor rows",
                self.records.len(),
                self.descriptors.rows()
            )));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.id as usize != i {
                return Err(Error::Data(format!("record at row {i} has id {}", r.id)));
            }
        }
        for (q, rel) in &self.labels {
            for &id in core::iter::once(q).chain(rel) {
                if id as usize >= self.records.len() {
                    return Err(Error::Data(format!("label references unknown record {id}")));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn rows(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Index over the database split.
    pub fn database_index<T: Real>(&self) -> Result<(DescriptorIndex<T>, Vec<usize>)> {
        let rows = self.rows(Split::Database);
        let mut m = Tensor2::zeros(rows.len(), self.dim());
        for (o, &r) in rows.iter().enumerate() {
            for (dst, &src) in m.row_mut(o).iter_mut().zip(self.descriptors.row(r)) {
                *dst = T::from_f64(src as f64);
            }
        }
        let ids = rows.iter().map(|&r| r as u32).collect();
        Ok((DescriptorIndex::new(ids, &m)?, rows))
    }

    pub fn descriptor<T: Real>(&self, id: u32) -> Vec<T> {
        self.descriptors
            .row(id as usize)
            .iter()
            .map(|&x| T::from_f64(x as f64))
            .collect()
    }

    /// Readings usable for record `id` in the given role, after windowing.
    /// In the query role only earlier readings are kept when the radio
    /// configuration asks for it.
    pub fn readings(&self, id: u32, as_query: bool, radio: &RadioConfig) -> Vec<RadioReading> {
        let r = &self.records[id as usize];
        window_readings(
            &r.radio,
            r.timestamp,
            radio.window,
            as_query && radio.query_past_only,
        )
    }

    /// Side information of the nodes of a context (query first).
    pub fn nodes(&self, ctx: &RetrievalContext, side: &SideInfoConfig) -> Vec<NodeSide> {
        self.nodes_with(ctx, side, |_, r| r)
    }

    /// Like [`Dataset::nodes`], dropping each radio reading with
    /// probability `p`.
    pub fn nodes_with_dropout<R: Rng + ?Sized>(
        &self,
        ctx: &RetrievalContext,
        side: &SideInfoConfig,
        p: f64,
        rng: &mut R,
    ) -> Vec<NodeSide> {
        self.nodes_with(ctx, side, |_, r| drop_readings(&r, p, rng))
    }

    fn nodes_with(
        &self,
        ctx: &RetrievalContext,
        side: &SideInfoConfig,
        mut thin: impl FnMut(u32, Vec<RadioReading>) -> Vec<RadioReading>,
    ) -> Vec<NodeSide> {
        core::iter::once(ctx.query)
            .chain(ctx.candidates.iter().copied())
            .enumerate()
            .map(|(row, id)| {
                let radio = if side.blocks.radio {
                    let readings = thin(id, self.readings(id, row == 0, &side.radio));
                    // a query without readings has no radio information at all
                    (row > 0 || !readings.is_empty()).then(|| {
                        radio_descriptor(&readings, &self.registry, side.radio.delta_max).0
                    })
                } else {
                    None
                };
                NodeSide {
                    id,
                    pose: self.records[id as usize].pose,
                    radio,
                }
            })
            .collect()
    }

    /// Initial top-`k` contexts of every record in `split`, retrieved from the
    /// database without images of the query's own session.
    pub fn initial_contexts<T: Real>(
        &self,
        index: &DescriptorIndex<T>,
        split: Split,
        k: usize,
    ) -> Result<Vec<RetrievalContext>> {
        let ids = index.ids();
        self.rows(split)
            .into_iter()
            .map(|row| {
                let q = &self.records[row];
                index.retrieve(q.id, &self.descriptor::<T>(q.id), k, |i| {
                    self.records[ids[i] as usize].session == q.session
                })
            })
            .collect()
    }

    /// Network input of a context.
    pub fn context_input<T: Real>(
        &self,
        ctx: &RetrievalContext,
        side: &Tensor2<f64>,
    ) -> ContextInput<T> {
        let n = ctx.candidates.len() + 1;
        let mut d = Tensor2::zeros(n, self.dim());
        for (row, id) in core::iter::once(ctx.query)
            .chain(ctx.candidates.iter().copied())
            .enumerate()
        {
            for (dst, &src) in d
                .row_mut(row)
                .iter_mut()
                .zip(self.descriptors.row(id as usize))
            {
                *dst = T::from_f64(src as f64);
            }
        }
        ContextInput {
            descriptors: d,
            side: side.cast(),
        }
    }

    /// Side affinity of a context; empty when no side block is enabled.
    pub fn side_affinity(
        &self,
        ctx: &RetrievalContext,
        l: usize,
        side: &SideInfoConfig,
    ) -> Result<Tensor2<f64>> {
        side_affinity(&self.nodes(ctx, side), l, side)
    }

    /// Database images whose positional affinity with `id` exceeds the
    /// relevance threshold.
    pub fn positional_relevance(
        &self,
        id: u32,
        candidates: &[u32],
        fov: &FovConfig,
    ) -> Result<Vec<bool>> {
        let pose = |i: u32| {
            self.records[i as usize]
                .pose
                .ok_or_else(|| Error::Data(format!("record {i} has no pose")))
        };
        let q = pose(id)?;
        candidates
            .iter()
            .map(|&c| Ok(fov_overlap(&q, &pose(c)?, fov) > RELEVANCE_THRESHOLD))
            .collect()
    }
}
