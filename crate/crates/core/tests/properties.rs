//! Randomized invariants.

mod common;

use common::Mat;
use proptest::prelude::*;

use stmae::dynfc::Adjacency;
use stmae::dynfc::{threshold_topk, topk_count};
use stmae::eval::{accuracy, auroc, classify_logits};
use stmae::model::{Model, ModelConfig};
use stmae::rng;
use stmae::ssl::{
    bce_loss, mask_snapshot, sample_context, sample_mask_times, sce_loss, LossBreakdown,
    MaskConfig, NodeMaskMode,
};

fn distinct_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(-1_000_000i64..1_000_000, n).prop_map(|s| {
        let mut v: Vec<f64> = s.into_iter().map(|x| x as f64 / 1000.0).collect();
        // break the sorted order deterministically
        let len = v.len();
        for i in 0..len {
            v.swap(i, (i * 7 + 3) % len);
        }
        v
    })
}

fn labels(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, n)
        .prop_filter("both classes", |l| l.contains(&0) && l.contains(&1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auroc_of_negated_scores_is_complement((s, y) in (4usize..40).prop_flat_map(|n| (distinct_scores(n), labels(n)))) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let total = auroc(&s, &y).unwrap() + auroc(&neg, &y).unwrap();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_ignores_monotone_transforms((s, y) in (4usize..40).prop_flat_map(|n| (distinct_scores(n), labels(n)))) {
        let t: Vec<f64> = s.iter().map(|v| (v / 500.0).tanh() * 3.0 + 1.0).collect();
        prop_assert_eq!(auroc(&s, &y).unwrap(), auroc(&t, &y).unwrap());
    }

    #[test]
    fn complemented_predictions_flip_accuracy(p in prop::collection::vec(0u8..2, 1..50), seed in 0u64..1000) {
        let y: Vec<u8> = p.iter().enumerate().map(|(i, v)| ((i as u64 * 31 + seed) % 3 == 0) as u8 ^ v).collect();
        let comp: Vec<u8> = p.iter().map(|v| 1 - v).collect();
        let sum = accuracy(&p, &y).unwrap() + accuracy(&comp, &y).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_threshold_matches_half_probability(z in prop::collection::vec(-30.0f64..30.0, 1..30)) {
        let got = classify_logits(&z);
        for (zi, c) in z.iter().zip(got) {
            prop_assert_eq!(c == 1, 1.0 / (1.0 + (-zi).exp()) >= 0.5);
        }
    }

    #[test]
    fn mask_sizes_follow_ratios(n in 2usize..30, a in 0.0f64..=1.0, b in 0.0f64..=1.0, seed: u64) {
        let x = Mat::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let adj = Adjacency::from_edges(n, &[(0, 1)]);
        let cfg = MaskConfig { node_ratio: a, edge_ratio: b, time_ratio: 0.5, node_mode: NodeMaskMode::Zero };
        let m = mask_snapshot(&x, &adj, &cfg, None, &mut rng::seeded(seed));
        let pairs = n * (n - 1) / 2;
        prop_assert_eq!(m.node_mask.len(), (a * n as f64).round() as usize);
        prop_assert_eq!(m.edge_flips.len(), (b * pairs as f64).round() as usize);
        for v in 0..n {
            let masked = m.node_mask.contains(&v);
            prop_assert_eq!(m.x_m.row(v).iter().all(|&e| e == 0.0), masked);
        }
        // flipping twice restores the graph
        prop_assert_eq!(stmae::ssl::flip_edges(&m.a_m, &m.edge_flips), adj);
        prop_assert!(m.a_m.is_valid());
    }

    #[test]
    fn mask_times_are_sorted_interior_and_sized(t in 3usize..60, rho in 0.01f64..=1.0, seed: u64) {
        let times = sample_mask_times(t, rho, &mut rng::seeded(seed)).unwrap();
        let want = ((rho * (t - 2) as f64).round() as usize).max(1);
        prop_assert_eq!(times.len(), want);
        prop_assert!(times.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(times.iter().all(|&s| s >= 2 && s < t));
    }

    #[test]
    fn context_always_brackets_the_target(t_len in 3usize..40, pick in 0usize..1000, seed: u64) {
        let t = 2 + pick % (t_len - 2);
        let (a, b) = sample_context(t, t_len, &mut rng::seeded(seed)).unwrap();
        prop_assert!(1 <= a && a < t && t < b && b <= t_len);
    }

    #[test]
    fn losses_are_bounded_and_finite(v in prop::collection::vec(-5.0f64..5.0, 30)) {
        let x = Mat::from_shape_vec((5, 6), v.clone()).unwrap();
        let y = x.mapv(|e| e * 0.5 + 1.0);
        let s = sce_loss(&x, &y, &[0, 1, 2, 3, 4], 2.0).unwrap().loss;
        prop_assert!((0.0..=4.0).contains(&s));
        let a = Mat::from_shape_fn((5, 5), |(i, j)| ((i + j) % 2) as f64);
        let p = Mat::from_shape_fn((5, 5), |(i, j)| 1.0 / (1.0 + (-v[i * 5 + j]).exp()));
        let l = bce_loss(&a, &p).loss;
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn breakdown_total_is_the_exact_sum(p in prop::array::uniform4(0.0f64..100.0)) {
        let b = LossBreakdown::from_parts(p[0], p[1], p[2], p[3]);
        prop_assert_eq!(b.l_spatial, p[0] + p[1]);
        prop_assert_eq!(b.l_temporal, p[2] + p[3]);
        prop_assert_eq!(b.l_total, b.l_spatial + b.l_temporal);
    }

    #[test]
    fn topk_keeps_the_largest_entries(n in 4usize..12, frac in 0.1f64..0.9, seed: u64) {
        let mut r = common::rng(seed);
        let x = common::random_mat(n, 20, &mut r);
        let (corr, _) = stmae::dynfc::pearson_fc(x.view());
        let adj = threshold_topk(&corr, frac).unwrap().adj;
        prop_assert!(adj.is_valid());
        let k = topk_count(n, frac);
        prop_assert!(adj.edge_count() * 2 <= k.saturating_sub(n) + 1);
        // every kept entry is at least as large as every dropped off-diagonal one
        let kept: Vec<f64> = adj.edges().iter().map(|&(i, j)| corr[[i, j]]).collect();
        if let Some(lo) = kept.iter().copied().reduce(f64::min) {
            for i in 0..n {
                for j in i + 1..n {
                    if !adj.has_edge(i, j) {
                        prop_assert!(corr[[i, j]] <= lo);
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn edge_decoders_are_symmetric_in_unit_interval(d in 1usize..6, seed in 0u64..1000) {
        let model = Model::new(ModelConfig::new(5, 2 * d), seed).unwrap();
        let mut s = model.session();
        let mut r = common::rng(seed);
        let za = s.tape.constant(common::random_mat(5, 2 * d, &mut r));
        let zb = s.tape.constant(common::random_mat(5, 2 * d, &mut r));
        let same = s.decode_edges_same(za);
        let ab = s.decode_edges_cross(za, zb);
        let ba = s.decode_edges_cross(zb, za);
        for v in [same, ab] {
            let m = s.tape.value(v);
            prop_assert!(m.iter().all(|&p| p > 0.0 && p < 1.0));
            prop_assert_eq!(m, &m.t().to_owned());
        }
        prop_assert_eq!(s.tape.value(ab), s.tape.value(ba));
    }
}
