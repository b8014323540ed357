//! Affinity features: similarities of every node (query + top-K candidates)
//! to the anchor set (query + first `L` candidates).
//!
//! Row `i` of an affinity matrix belongs to node `i` (row 0 is the query).
//! Blocks are concatenated as `vis ‖ pos ‖ hdg ‖ rad`:
//!
//! | block | columns | entry `(i, j)` |
//! |-------|---------|----------------|
//! | vis | `L + 1` | cosine of projected descriptors of node `i` and anchor `j` |
//! | pos | `L` | FoV overlap of node `i` and candidate anchor `j + 1`; query row zero |
//! | hdg | `L + 1` | heading similarity of node `i` and anchor `j` |
//! | rad | `L + 1` | radio similarity of node `i` and anchor `j` |
//!
//! When the query lacks heading or radio data (or its side of the block is
//! switched off) the block keeps its width: the query row and the query
//! column are zero.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::geometry::{fov_overlap, heading_similarity, FovConfig, Pose};
use crate::radio::{radio_similarity, RadioConfig};
use crate::tensor::{self, Tensor2};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub positional: bool,
    pub heading: bool,
    pub radio: bool,
    /// Use the query's own heading in the heading block.
    pub query_heading: bool,
    /// Use the query's own radio scan in the radio block.
    pub query_radio: bool,
}

impl BlockConfig {
    pub const VISUAL: Self = Self {
        positional: false,
        heading: false,
        radio: false,
        query_heading: false,
        query_radio: false,
    };

    /// Width of the side-information part of the affinity vector.
    pub fn side_dim(&self, l: usize) -> usize {
        let mut d = 0;
        if self.positional {
            d += l;
        }
        if self.heading {
            d += l + 1;
        }
        if self.radio {
            d += l + 1;
        }
        d
    }

    /// Width `D_a` of the full affinity vector.
    pub fn affinity_dim(&self, l: usize) -> usize {
        l + 1 + self.side_dim(l)
    }
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self::VISUAL
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SideInfoConfig {
    pub fov: FovConfig,
    pub radio: RadioConfig,
    pub blocks: BlockConfig,
}

/// Side information of one node.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeSide {
    pub id: u32,
    pub pose: Option<Pose>,
    /// Radio descriptor over the dataset's endpoint registry.
    pub radio: Option<Vec<f64>>,
}

fn check_anchors(nodes: usize, l: usize) -> Result<()> {
    if nodes == 0 || l + 1 > nodes {
        return Err(Error::Config(alloc::format!(
            "anchor count L = {l} exceeds the {} retrieved candidates",
            nodes.saturating_sub(1)
        )));
    }
    Ok(())
}

/// Visual block from projected descriptors (row 0 the query). Rows are
/// L2-normalized here; similarities are clamped to `[−1, 1]`.
pub fn visual_affinity<T: Real>(projected: &Tensor2<T>, l: usize) -> Result<Tensor2<T>> {
    check_anchors(projected.rows(), l)?;
    let mut unit = Tensor2::zeros(projected.rows(), projected.cols());
    for r in 0..projected.rows() {
        let (_, degenerate) = tensor::normalize_into(projected.row(r), unit.row_mut(r));
        if degenerate {
            return Err(Error::DegenerateNorm);
        }
    }
    let anchors = unit.slice_rows(0, l + 1)?;
    let sim = tensor::matmul_t(&unit, &anchors)?;
    Ok(sim.map(|s| s.max(-T::one()).min(T::one())))
}

fn candidate_pose(node: &NodeSide) -> Result<&Pose> {
    node.pose
        .as_ref()
        .ok_or_else(|| Error::Data(alloc::format!("record {} has no pose", node.id)))
}

fn candidate_radio(node: &NodeSide) -> Result<&[f64]> {
    node.radio
        .as_deref()
        .ok_or_else(|| Error::Data(alloc::format!("record {} has no radio scan", node.id)))
}

/// Positional block, `(K + 1) × L`.
pub fn positional_affinity(nodes: &[NodeSide], l: usize, fov: &FovConfig) -> Result<Tensor2<f64>> {
    check_anchors(nodes.len(), l)?;
    let mut out = Tensor2::zeros(nodes.len(), l);
    let poses: Vec<&Pose> = nodes[1..]
        .iter()
        .map(candidate_pose)
        .collect::<Result<_>>()?;
    for i in 1..nodes.len() {
        for j in 0..l {
            let v = if i == j + 1 {
                1.0
            } else {
                fov_overlap(poses[i - 1], poses[j], fov)
            };
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Shared layout of the heading and radio blocks.
fn anchored_block<D: ?Sized>(
    nodes: &[NodeSide],
    l: usize,
    query: Option<&D>,
    candidate: impl Fn(&NodeSide) -> Result<&D>,
    sim: impl Fn(&D, &D) -> Result<f64>,
) -> Result<Tensor2<f64>> {
    check_anchors(nodes.len(), l)?;
    let mut data: Vec<Option<&D>> = Vec::with_capacity(nodes.len());
    data.push(query);
    for n in &nodes[1..] {
        data.push(Some(candidate(n)?));
    }
    let mut out = Tensor2::zeros(nodes.len(), l + 1);
    for i in 0..nodes.len() {
        for j in 0..=l {
            if let (Some(a), Some(b)) = (data[i], data[j]) {
                out.set(i, j, sim(a, b)?);
            }
        }
    }
    Ok(out)
}

/// Heading block, `(K + 1) × (L + 1)`.
pub fn heading_affinity(nodes: &[NodeSide], l: usize, use_query: bool) -> Result<Tensor2<f64>> {
    let query = if use_query {
        nodes
            .first()
            .and_then(|q| q.pose.as_ref())
            .map(|p| &p.heading)
    } else {
        None
    };
    anchored_block(
        nodes,
        l,
        query,
        |n| candidate_pose(n).map(|p| &p.heading),
        |a, b| Ok(heading_similarity(*a, *b)),
    )
}

/// Radio block, `(K + 1) × (L + 1)`.
pub fn radio_affinity(
    nodes: &[NodeSide],
    l: usize,
    use_query: bool,
    radio: &RadioConfig,
) -> Result<Tensor2<f64>> {
    let query = if use_query {
        nodes.first().and_then(|q| q.radio.as_deref())
    } else {
        None
    };
    anchored_block(nodes, l, query, candidate_radio, |a, b| {
        radio_similarity(a, b, radio.beta).map(|s| s.clamp(-1.0, 1.0))
    })
}

/// Enabled side blocks concatenated in `pos ‖ hdg ‖ rad` order.
pub fn side_affinity(nodes: &[NodeSide], l: usize, cfg: &SideInfoConfig) -> Result<Tensor2<f64>> {
    let mut parts = Vec::new();
    if cfg.blocks.positional {
        parts.push(positional_affinity(nodes, l, &cfg.fov)?);
    }
    if cfg.blocks.heading {
        parts.push(heading_affinity(nodes, l, cfg.blocks.query_heading)?);
    }
    if cfg.blocks.radio {
        parts.push(radio_affinity(
            nodes,
            l,
            cfg.blocks.query_radio,
            &cfg.radio,
        )?);
    }
    if parts.is_empty() {
        return Ok(Tensor2::zeros(nodes.len(), 0));
    }
    let refs: Vec<&Tensor2<f64>> = parts.iter().collect();
    Tensor2::concat_cols(&refs)
}

/// Full affinity matrix `vis ‖ side`.
pub fn assemble_affinity<T: Real>(vis: &Tensor2<T>, side: &Tensor2<f64>) -> Result<Tensor2<T>> {
    Tensor2::concat_cols(&[vis, &side.cast::<T>()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fov() -> FovConfig {
        FovConfig {
            radius: 10.0,
            angle: PI / 2.0,
            elevation_gate: Some(3.0),
        }
    }

    fn node(id: u32, x: f64, y: f64, h: f64) -> NodeSide {
        NodeSide {
            id,
            pose: Some(Pose::new(x, y, 0.0, h)),
            radio: Some(alloc::vec![x.abs() * 3.0, y.abs() * 2.0, 100.0]),
        }
    }

    #[test]
    fn dims() {
        let full_msls = BlockConfig {
            positional: true,
            heading: true,
            ..BlockConfig::VISUAL
        };
        assert_eq!(BlockConfig::VISUAL.affinity_dim(5), 6);
        assert_eq!(full_msls.affinity_dim(5), 6 + 5 + 6);
        let full_lamar = BlockConfig {
            positional: true,
            radio: true,
            query_radio: true,
            ..BlockConfig::VISUAL
        };
        assert_eq!(full_lamar.affinity_dim(127), 128 + 127 + 128);
    }

    #[test]
    fn visual_hand_case() {
        // K = 2, L = 1
        let d = Tensor2::from_rows(&[[1.0, 0.0], [1.0, 1.0], [0.0, -2.0]]).unwrap();
        let a = visual_affinity(&d, 1).unwrap();
        let r = 1.0 / libm::sqrt(2.0);
        let expected = [[1.0, r], [r, 1.0], [0.0, -r]];
        for (i, row) in expected.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                assert!((a.get(i, j) - e).abs() < 1e-12);
            }
        }
        assert!(matches!(visual_affinity(&d, 3), Err(Error::Config(_))));
    }

    #[test]
    fn identical_descriptors_give_ones() {
        let d = Tensor2::filled(5, 3, 0.7f64);
        let a = visual_affinity(&d, 4).unwrap();
        assert!(a.data().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_lag_ordering_matches_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let d = Tensor2::from_rows(&rows).unwrap();
        let a = visual_affinity(&d, 0).unwrap();
        for i in 1..12 {
            let c = tensor::cosine_sim(d.row(i), d.row(0)).unwrap();
            assert!((a.get(i, 0) - c).abs() < 1e-12);
        }
    }

    #[test]
    fn positional_block() {
        let nodes = [
            node(0, 0.0, 0.0, 0.0),
            node(1, 0.0, 0.0, 0.0),
            node(2, 2.0, 1.0, 0.3),
            node(3, 50.0, 0.0, 0.0),
        ];
        let p = positional_affinity(&nodes, 2, &fov()).unwrap();
        assert_eq!(p.shape(), (4, 2));
        assert_eq!(p.row(0), &[0.0, 0.0]);
        assert_eq!(p.get(1, 0), 1.0);
        assert_eq!(p.get(2, 1), 1.0);
        assert_eq!(p.row(3), &[0.0, 0.0]);
        let o = fov_overlap(
            nodes[1].pose.as_ref().unwrap(),
            nodes[2].pose.as_ref().unwrap(),
            &fov(),
        );
        assert_eq!(p.get(1, 1), o);
        assert_eq!(
            p.get(2, 0),
            fov_overlap(
                nodes[2].pose.as_ref().unwrap(),
                nodes[1].pose.as_ref().unwrap(),
                &fov()
            )
        );

        let mut missing = nodes.clone();
        missing[2].pose = None;
        assert_eq!(
            positional_affinity(&missing, 2, &fov()),
            Err(Error::Data("record 2 has no pose".into()))
        );
    }

    #[test]
    fn query_without_side_data_zeroes_row_and_column() {
        let mut nodes = alloc::vec![
            node(0, 0.0, 0.0, 1.0),
            node(1, 1.0, 0.0, 1.0),
            node(2, 0.0, 3.0, 4.0)
        ];
        let h = heading_affinity(&nodes, 2, false).unwrap();
        assert_eq!(h.row(0), &[0.0; 3]);
        assert_eq!((h.get(1, 0), h.get(2, 0)), (0.0, 0.0));
        assert_eq!(h.get(1, 1), 1.0);
        let with_query = heading_affinity(&nodes, 2, true).unwrap();
        assert_eq!(with_query.get(0, 0), 1.0);
        assert_eq!(with_query.get(1, 0), 1.0);

        nodes[0].radio = None;
        let r = radio_affinity(&nodes, 1, true, &RadioConfig::default()).unwrap();
        assert_eq!(r.row(0), &[0.0; 2]);
        assert_eq!(r.get(1, 1), 1.0);
        nodes[1].radio = None;
        assert!(matches!(
            radio_affinity(&nodes, 1, true, &RadioConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn side_blocks_concatenate_in_order() {
        let nodes = [
            node(0, 0.0, 0.0, 0.0),
            node(1, 1.0, 0.0, 0.5),
            node(2, 2.0, 2.0, 3.0),
        ];
        let cfg = SideInfoConfig {
            fov: fov(),
            radio: RadioConfig::default(),
            blocks: BlockConfig {
                positional: true,
                heading: true,
                radio: true,
                query_heading: true,
                query_radio: true,
            },
        };
        let s = side_affinity(&nodes, 1, &cfg).unwrap();
        assert_eq!(s.shape(), (3, cfg.blocks.side_dim(1)));
        let h = heading_affinity(&nodes, 1, true).unwrap();
        let r = radio_affinity(&nodes, 1, true, &cfg.radio).unwrap();
        for i in 0..3 {
            assert_eq!(&s.row(i)[1..3], h.row(i));
            assert_eq!(&s.row(i)[3..5], r.row(i));
        }
        let vis = Tensor2::filled(3, 2, 0.5f32);
        assert_eq!(assemble_affinity(&vis, &s).unwrap().cols(), 2 + 5);
    }

    fn random_nodes(rng: &mut ChaCha8Rng, n: usize) -> Vec<NodeSide> {
        (0..n)
            .map(|i| NodeSide {
                id: i as u32,
                pose: Some(Pose::new(
                    rng.random_range(-15.0..15.0),
                    rng.random_range(-15.0..15.0),
                    rng.random_range(0.0..5.0),
                    rng.random_range(0.0..7.0),
                )),
                radio: Some((0..8).map(|_| rng.random_range(1.0..500.0)).collect()),
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn side_values_in_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = random_nodes(&mut rng, 9);
            let p = positional_affinity(&nodes, 4, &fov()).unwrap();
            prop_assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let h = heading_affinity(&nodes, 4, true).unwrap();
            prop_assert!(h.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            let r = radio_affinity(&nodes, 4, true, &RadioConfig::default()).unwrap();
            prop_assert!(r.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }

        #[test]
        fn permuting_non_anchor_candidates_permutes_rows(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = 3;
            let nodes = random_nodes(&mut rng, 10);
            let mut perm: Vec<usize> = (0..10).collect();
            // shuffle indices > L
            for i in (l + 2..10).rev() {
                let j = rng.random_range(l + 1..=i);
                perm.swap(i, j);
            }
            let permuted: Vec<NodeSide> = perm.iter().map(|&i| nodes[i].clone()).collect();
            let cfg = SideInfoConfig {
                fov: fov(),
                radio: RadioConfig::default(),
                blocks: BlockConfig { positional: true, heading: true, radio: true, query_heading: true, query_radio: true },
            };
            let a = side_affinity(&nodes, l, &cfg).unwrap();
            let b = side_affinity(&permuted, l, &cfg).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(b.row(new), a.row(old));
            }
        }
    }
}
