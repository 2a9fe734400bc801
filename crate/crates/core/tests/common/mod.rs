//! Brute-force reference implementations shared by the integration tests
//! and the acceptance harness. Each one is written from the definition,
//! without reusing library code paths.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Textbook Pearson correlation of rows `i` and `j`.
pub fn pearson(x: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let w = x.ncols() as f64;
    let mi = x.row(i).sum() / w;
    let mj = x.row(j).sum() / w;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for t in 0..x.ncols() {
        let a = x[[i, t]] - mi;
        let b = x[[j, t]] - mj;
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    sxy / (sxx * syy).sqrt()
}

/// Upper-triangle edge set of top-k thresholding: sort all `N^2` entries
/// by value (descending, ties by flat index), keep `round(frac * N^2)`,
/// drop self-loops, symmetrize.
pub fn topk_edges(corr: &Mat, frac: f64) -> BTreeSet<(usize, usize)> {
    let n = corr.nrows();
    let k = (frac * (n * n) as f64).round() as usize;
    let mut entries: Vec<(f64, usize)> = corr.iter().copied().zip(0..).collect();
    entries.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = BTreeSet::new();
    for &(_, idx) in entries.iter().take(k) {
        let (i, j) = (idx / n, idx % n);
        if i != j {
            out.insert((i.min(j), i.max(j)));
        }
    }
    out
}

/// Triangles over all vertex triples; wedges as paths of length two.
pub fn triads(edges: &BTreeSet<(usize, usize)>, n: usize) -> (u64, u64) {
    let has = |a: usize, b: usize| edges.contains(&(a.min(b), a.max(b)));
    let mut triangles = 0;
    let mut wedges = 0;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                if has(a, b) && has(b, c) && has(a, c) {
                    triangles += 1;
                }
            }
        }
    }
    for centre in 0..n {
        for a in 0..n {
            for b in a + 1..n {
                if a != centre && b != centre && has(centre, a) && has(centre, b) {
                    wedges += 1;
                }
            }
        }
    }
    (triangles, wedges)
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
pub fn auroc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Mean over rows of `(1 - cos(x_v, y_v))^gamma`.
pub fn sce_rows(x: &Mat, y: &Mat, rows: &[usize], gamma: f64) -> f64 {
    let mut total = 0.0;
    for &v in rows {
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for j in 0..x.ncols() {
            dot += x[[v, j]] * y[[v, j]];
            nx += x[[v, j]] * x[[v, j]];
            ny += y[[v, j]] * y[[v, j]];
        }
        total += (1.0 - dot / (nx.sqrt() * ny.sqrt())).powf(gamma);
    }
    total / rows.len() as f64
}

/// Mean binary cross-entropy over off-diagonal entries.
pub fn bce_offdiag(a: &Mat, p: &Mat) -> f64 {
    let n = a.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let q = p[[i, j]].clamp(1e-7, 1.0 - 1e-7);
                total -= a[[i, j]] * q.ln() + (1.0 - a[[i, j]]) * (1.0 - q).ln();
            }
        }
    }
    total / (n * (n - 1)) as f64
}

/// Plain L2-regularized logistic regression by full-batch gradient descent
/// on standardized features. Returns held-out scores.
pub fn logistic_scores(
    train_x: &[Vec<f64>],
    train_y: &[u8],
    test_x: &[Vec<f64>],
    l2: f64,
    steps: usize,
) -> Vec<f64> {
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for row in train_x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n;
        }
    }
    for row in train_x {
        for k in 0..d {
            sd[k] += (row[k] - mean[k]).powi(2) / n;
        }
    }
    let sd: Vec<f64> = sd.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let norm =
        |row: &Vec<f64>| -> Vec<f64> { (0..d).map(|k| (row[k] - mean[k]) / sd[k]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(norm).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.1;
    for _ in 0..steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(train_y) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
            gb += err / n;
            for k in 0..d {
                gw[k] += err * x[k] / n;
            }
        }
        for k in 0..d {
            w[k] -= lr * (gw[k] + l2 * w[k]);
        }
        b -= lr * gb;
    }
    test_x
        .iter()
        .map(|row| {
            let x = norm(row);
            b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}
