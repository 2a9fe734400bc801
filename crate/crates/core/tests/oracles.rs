//! Library results against brute-force references.

mod common;

use common::*;
use ndarray::s;
use rand::Rng;

use stmae::dynfc::{self, graph_stats, pearson_fc, threshold_topk, triad_counts, Adjacency};
use stmae::eval::{accuracy, auroc, mae};
use stmae::ingest::{split_folds, synth_subjects, SynthSpec};
use stmae::ssl::{bce_loss, sce_loss, BCE_CLAMP};

#[test]
fn pearson_matches_pairwise_formula() {
    let mut r = rng(1);
    for _ in 0..50 {
        let n = r.random_range(2..=10);
        let w = r.random_range(3..=40);
        let x = random_mat(n, w, &mut r);
        let (corr, degenerate) = pearson_fc(x.view());
        assert_eq!(degenerate, 0);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { pearson(x.view(), i, j) };
                assert!(
                    (corr[[i, j]] - want).abs() < 1e-12,
                    "({i},{j}) {} vs {want}",
                    corr[[i, j]]
                );
            }
        }
    }
}

#[test]
fn topk_and_triads_match_brute_force() {
    let mut r = rng(2);
    for _ in 0..50 {
        let n = r.random_range(4..=10);
        let x = random_mat(n, 30, &mut r);
        let (corr, _) = pearson_fc(x.view());
        let frac = r.random_range(0.15..0.6);
        let adj = threshold_topk(&corr, frac).unwrap().adj;
        let want = topk_edges(&corr, frac);
        let got: std::collections::BTreeSet<_> = adj.edges().into_iter().collect();
        assert_eq!(got, want);
        let tc = triad_counts(&adj);
        assert_eq!((tc.triangles, tc.wedges), triads(&want, n));
    }
}

#[test]
fn edge_count_follows_topk_formula() {
    // (round(frac * N^2) - N) / 2 whenever the correlation diagonal holds
    // the N largest entries.
    for (n, frac, edges) in [(32usize, 0.3, 138usize), (400, 0.3, 23_800)] {
        let mut r = rng(n as u64);
        let x = random_mat(n, 3 * n, &mut r);
        let (corr, _) = pearson_fc(x.view());
        let adj = threshold_topk(&corr, frac).unwrap().adj;
        assert_eq!(adj.edge_count(), edges, "N = {n}");
    }
}

#[test]
fn stats_report_average_degree() {
    let subjects = synth_subjects(2, 32, 300, 0, &SynthSpec::default()).unwrap();
    let graphs: Vec<_> = subjects
        .iter()
        .map(|s| dynfc::build_dynamic_graph(&s.series, 50, 16, 0.3).unwrap())
        .collect();
    assert!(graphs.iter().all(|g| g.len() == 16));
    let st = graph_stats(&graphs).unwrap();
    assert_eq!(st.n_edges_avg, 138.0);
    assert_eq!(st.d_avg, 2.0 * 138.0 / 32.0);
}

#[test]
fn auroc_matches_pair_counting() {
    let mut r = rng(3);
    for _ in 0..100 {
        let n = r.random_range(2..=60);
        let mut labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| (r.random_range(-5..5)) as f64 / 2.0)
            .collect();
        let got = auroc(&scores, &labels).unwrap();
        assert!((got - auroc_pairs(&scores, &labels)).abs() < 1e-12);
    }
}

#[test]
fn mae_and_accuracy_match_elementwise() {
    let mut r = rng(4);
    let p: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
    let t: Vec<f64> = (0..40).map(|_| r.random_range(-3.0..3.0)).collect();
    let want = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>() / 40.0;
    assert!((mae(&p, &t).unwrap() - want).abs() < 1e-12);
    let yp: Vec<u8> = (0..40).map(|_| r.random_range(0..2)).collect();
    let yt: Vec<u8> = (0..40).map(|_| r.random_range(0..2)).collect();
    let hits = yp.iter().zip(&yt).filter(|(a, b)| a == b).count() as f64;
    assert!((accuracy(&yp, &yt).unwrap() - hits / 40.0).abs() < 1e-12);
}

#[test]
fn sce_matches_row_oracle() {
    let mut r = rng(5);
    for _ in 0..20 {
        let x = random_mat(5, 3, &mut r);
        let y = random_mat(5, 3, &mut r);
        let rows = [0, 2, 3];
        let got = sce_loss(&x, &y, &rows, 2.0).unwrap().loss;
        assert!((got - sce_rows(&x, &y, &rows, 2.0)).abs() < 1e-12);
    }
}

#[test]
fn bce_matches_entry_oracle() {
    let mut r = rng(6);
    let mut a = Mat::zeros((4, 4));
    for i in 0..4 {
        for j in i + 1..4 {
            let e = f64::from(r.random_range(0..2u8));
            a[[i, j]] = e;
            a[[j, i]] = e;
        }
    }
    let p = Mat::from_shape_fn((4, 4), |_| r.random_range(0.01..0.99));
    assert!((bce_loss(&a, &p).loss - bce_offdiag(&a, &p)).abs() < 1e-12);
    let matching = a.mapv(|v| if v > 0.5 { 1.0 - BCE_CLAMP } else { BCE_CLAMP });
    assert!((bce_loss(&a, &matching).loss + (1.0 - 1e-7f64).ln()).abs() < 1e-15);
}

#[test]
fn static_fc_separates_synthetic_classes() {
    // A linear classifier on the full-series correlation matrix must find
    // the class signal the generator plants.
    let subjects = synth_subjects(200, 64, 300, 0, &SynthSpec::default()).unwrap();
    let ids: Vec<(String, Option<u8>)> = subjects
        .iter()
        .map(|s| (s.id().to_string(), s.labels.class))
        .collect();
    let folds = split_folds(&ids, 4, 0).unwrap();
    let features: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| {
            let (c, _) = pearson_fc(s.series.data().slice(s![.., ..]));
            let n = c.nrows();
            (0..n)
                .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
                .map(|(i, j)| c[[i, j]])
                .collect()
        })
        .collect();
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (s, f) in subjects.iter().zip(features) {
        let y = s.labels.class.unwrap();
        if folds.fold_of(s.id()) == Some(0) {
            test_x.push(f);
            test_y.push(y);
        } else {
            train_x.push(f);
            train_y.push(y);
        }
    }
    let scores = logistic_scores(&train_x, &train_y, &test_x, 1e-2, 200);
    let a = auroc(&scores, &test_y).unwrap();
    assert!(a > 0.8, "held-out AUROC {a}");
}

#[test]
fn empty_adjacency_has_no_triads() {
    let tc = triad_counts(&Adjacency::empty(5));
    assert_eq!((tc.triangles, tc.wedges), (0, 0));
}
