use gcsa_core::affinity::BlockConfig;
use gcsa_core::gradcheck::reference_config;
use gcsa_core::metrics::evaluate;
use gcsa_core::model::{ContextInput, InputMode, Model, ModelConfig};
use gcsa_core::tensor::Tensor2;
use proptest::prelude::*;
use std::collections::{BTreeMap, BTreeSet};

fn input(cfg: &ModelConfig, desc: &[f64], side: &[f64]) -> ContextInput<f64> {
    let n = cfg.k + 1;
    let sd = cfg.blocks.side_dim(cfg.l);
    ContextInput {
        descriptors: Tensor2::from_vec(n, cfg.d, desc[..n * cfg.d].to_vec()).unwrap(),
        side: Tensor2::from_vec(n, sd, side[..n * sd].to_vec()).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn non_anchor_permutation_permutes_outputs(
        seed in 0u64..1000,
        desc in prop::collection::vec(-1.0f64..1.0, 8 * 16),
        side in prop::collection::vec(-1.0f64..1.0, 8 * 11),
        perm in Just((4usize..8).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let cfg = reference_config();
        let m = Model::<f64>::init(cfg.clone(), seed).unwrap();
        let x = input(&cfg, &desc, &side);
        // rows 0..=L are the query and anchors
        let order: Vec<usize> = (0..4).chain(perm.iter().copied()).collect();
        let mut y = x.clone();
        for (dst, &src) in order.iter().enumerate() {
            y.descriptors.row_mut(dst).copy_from_slice(x.descriptors.row(src));
            y.side.row_mut(dst).copy_from_slice(x.side.row(src));
        }
        let a = m.refine(&x).unwrap();
        let b = m.refine(&y).unwrap();
        for (dst, &src) in order.iter().enumerate() {
            for (u, v) in b.row(dst).iter().zip(a.row(src)) {
                prop_assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn identity_model_without_anchors_keeps_initial_order(
        desc in prop::collection::vec(-1.0f64..1.0, 21 * 8),
    ) {
        let cfg = ModelConfig {
            d: 8,
            d0: 8,
            k: 20,
            l: 0,
            blocks: BlockConfig::VISUAL,
            projection: false,
            gnn: false,
            input: InputMode::Affinity,
            ..reference_config()
        };
        let m = Model::<f64>::init(cfg.clone(), 0).unwrap();
        let x = input(&cfg, &desc, &[]);
        let q = x.descriptors.row(0);
        let cos: Vec<f64> = (1..=cfg.k)
            .map(|i| gcsa_core::tensor::cosine_sim(q, x.descriptors.row(i)).unwrap())
            .collect();
        let mut initial: Vec<usize> = (0..cfg.k).collect();
        initial.sort_by(|&a, &b| cos[b].total_cmp(&cos[a]).then(a.cmp(&b)));
        prop_assert_eq!(m.rerank(&x).unwrap(), initial);
    }

    #[test]
    fn metric_identities_hold(
        rankings in prop::collection::vec(Just((0u32..40).collect::<Vec<_>>()).prop_shuffle(), 1..20),
        relevant in prop::collection::vec(prop::collection::btree_set(0u32..40, 1..6), 20),
    ) {
        let r: BTreeMap<u32, Vec<u32>> = rankings.into_iter().enumerate().map(|(i, v)| (i as u32, v)).collect();
        let l: BTreeMap<u32, BTreeSet<u32>> = relevant.into_iter().enumerate().map(|(i, v)| (i as u32, v)).collect();
        let ks = [1, 5, 10, 20, 40];
        let m = evaluate(&r, &l, &ks).unwrap();
        prop_assert_eq!(m.map[0], m.recall[0]);
        prop_assert!(m.recall.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.map.iter().chain(&m.recall).all(|v| (0.0..=1.0).contains(v)));
    }
}
