//! Dynamic functional connectivity: sliding-window Pearson correlation,
//! top-k binarization and structural statistics.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::ingest::RoiTimeSeries;
use crate::tape::Mat;

/// Symmetric binary adjacency with an empty diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency(Array2<u8>);

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Self(Array2::zeros((n, n)))
    }

    /// Builds from an undirected edge list; self-loops are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut a = Self::empty(n);
        for &(i, j) in edges {
            assert_ne!(i, j, "self-loop");
            a.0[[i, j]] = 1;
            a.0[[j, i]] = 1;
        }
        a
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.0[[i, j]] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        assert_ne!(i, j, "self-loop");
        let v = u8::from(on);
        self.0[[i, j]] = v;
        self.0[[j, i]] = v;
    }

    pub fn edge_count(&self) -> usize {
        self.0.iter().filter(|&&v| v == 1).count() / 2
    }

    pub fn degree(&self, i: usize) -> usize {
        self.0.row(i).iter().filter(|&&v| v == 1).count()
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn to_f64(&self) -> Mat {
        self.0.mapv(f64::from)
    }

    pub fn raw(&self) -> &Array2<u8> {
        &self.0
    }

    pub fn is_valid(&self) -> bool {
        let n = self.n();
        (0..n).all(|i| self.0[[i, i]] == 0)
            && (0..n)
                .all(|i| (0..n).all(|j| self.0[[i, j]] == self.0[[j, i]] && self.0[[i, j]] <= 1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphSnapshot {
    /// 1-based window index.
    pub t: usize,
    pub corr: Mat,
    pub adj: Adjacency,
    /// Mean signal of each ROI over the window.
    pub mean_signal: Vec<f64>,
    /// ROIs with zero variance in this window.
    pub degenerate_rois: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicGraph {
    pub subject_id: String,
    pub snapshots: Vec<GraphSnapshot>,
    pub window: usize,
    pub stride: usize,
    pub frac: f64,
    pub n_rois: usize,
}

impl DynamicGraph {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    /// Snapshot at 1-based time index `t`.
    pub fn at(&self, t: usize) -> &GraphSnapshot {
        &self.snapshots[t - 1]
    }
}

/// Number of windows of `window` timepoints at `stride` over `total` timepoints.
pub fn window_count(total: usize, window: usize, stride: usize) -> usize {
    if window > total || stride == 0 {
        0
    } else {
        (total - window) / stride + 1
    }
}

/// Pearson correlation between the rows of an `N x W` window. Rows with
/// zero variance correlate 0 with everything, themselves included; the
/// second return value counts them.
pub fn pearson_fc(window: ArrayView2<f64>) -> (Mat, usize) {
    let (n, w) = window.dim();
    assert!(w >= 2, "correlation window needs at least 2 samples");
    let mut centered = Mat::zeros((n, w));
    let mut norms = vec![0.0; n];
    let mut degenerate = vec![false; n];
    for i in 0..n {
        let row = window.row(i);
        let mean = row.sum() / w as f64;
        let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut ss = 0.0;
        for j in 0..w {
            let c = row[j] - mean;
            centered[[i, j]] = c;
            ss += c * c;
        }
        let tiny = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
        degenerate[i] = ss <= tiny * tiny * w as f64;
        norms[i] = ss.sqrt();
    }
    let cov = centered.dot(&centered.t());
    let mut corr = Mat::zeros((n, n));
    for i in 0..n {
        if degenerate[i] {
            continue;
        }
        corr[[i, i]] = 1.0;
        for j in i + 1..n {
            if degenerate[j] {
                continue;
            }
            let r = (cov[[i, j]] / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            corr[[i, j]] = r;
            corr[[j, i]] = r;
        }
    }
    (corr, degenerate.iter().filter(|&&d| d).count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thresholded {
    pub adj: Adjacency,
    /// Set when `k <= N`, so nothing survives diagonal removal.
    pub empty_warning: bool,
}

/// Number of matrix entries kept by [`threshold_topk`].
pub fn topk_count(n: usize, frac: f64) -> usize {
    (frac * (n * n) as f64).round() as usize
}

/// Keeps the `round(frac * N^2)` largest entries of the full matrix (ties
/// go to the smaller `(row, col)`), drops the diagonal and symmetrizes.
pub fn threshold_topk(corr: &Mat, frac: f64) -> Result<Thresholded> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::config(format!(
            "threshold fraction must lie in (0, 1), got {frac}"
        )));
    }
    let n = corr.nrows();
    if corr.ncols() != n {
        return Err(Error::data("correlation matrix must be square"));
    }
    let k = topk_count(n, frac);
    let mut adj = Adjacency::empty(n);
    if k <= n {
        log::warn!("top-{k} of a {n}x{n} matrix leaves no off-diagonal entries");
        return Ok(Thresholded {
            adj,
            empty_warning: true,
        });
    }
    let flat = corr
        .as_slice()
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| corr.iter().copied().collect());
    let mut order: Vec<u32> = (0..(n * n) as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        flat[*b as usize]
            .total_cmp(&flat[*a as usize])
            .then_with(|| a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
    }
    for &idx in &order[..k] {
        let (i, j) = (idx as usize / n, idx as usize % n);
        if i != j {
            adj.0[[i, j]] = 1;
            adj.0[[j, i]] = 1;
        }
    }
    Ok(Thresholded {
        adj,
        empty_warning: false,
    })
}

/// One snapshot per window position; snapshot `t` covers columns
/// `[(t-1)*stride, (t-1)*stride + window)`.
pub fn build_dynamic_graph(
    ts: &RoiTimeSeries,
    window: usize,
    stride: usize,
    frac: f64,
) -> Result<DynamicGraph> {
    let total = ts.n_timepoints();
    if window < 2 {
        return Err(Error::config(format!(
            "window must be at least 2, got {window}"
        )));
    }
    if stride == 0 {
        return Err(Error::config("stride must be at least 1"));
    }
    if window > total {
        return Err(Error::data(format!(
            "subject {:?}: window {window} exceeds {total} timepoints",
            ts.subject_id
        )));
    }
    let count = window_count(total, window, stride);
    let data = ts.data();
    let snapshots = (0..count)
        .map(|w| {
            let start = w * stride;
            let view = data.slice(s![.., start..start + window]);
            let (corr, degenerate_rois) = pearson_fc(view);
            let th = threshold_topk(&corr, frac)?;
            let mean_signal = view
                .rows()
                .into_iter()
                .map(|r| r.sum() / window as f64)
                .collect();
            Ok(GraphSnapshot {
                t: w + 1,
                corr,
                adj: th.adj,
                mean_signal,
                degenerate_rois,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DynamicGraph {
        subject_id: ts.subject_id.clone(),
        snapshots,
        window,
        stride,
        frac,
        n_rois: ts.n_rois(),
    })
}

/// Triangle and wedge counts of one graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TriadCounts {
    pub triangles: u64,
    pub wedges: u64,
}

pub fn triad_counts(adj: &Adjacency) -> TriadCounts {
    let n = adj.n();
    let words = n.div_ceil(64);
    let mut bits = vec![0u64; n * words];
    for i in 0..n {
        for j in 0..n {
            if adj.has_edge(i, j) {
                bits[i * words + j / 64] |= 1 << (j % 64);
            }
        }
    }
    let mut closed = 0u64;
    let mut wedges = 0u64;
    for i in 0..n {
        let d = adj.degree(i) as u64;
        wedges += d * d.saturating_sub(1) / 2;
        for j in i + 1..n {
            if adj.has_edge(i, j) {
                let ri = &bits[i * words..(i + 1) * words];
                let rj = &bits[j * words..(j + 1) * words];
                closed += ri
                    .iter()
                    .zip(rj)
                    .map(|(a, b)| (a & b).count_ones() as u64)
                    .sum::<u64>();
            }
        }
    }
    // each triangle is seen once per edge
    TriadCounts {
        triangles: closed / 3,
        wedges,
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GraphStats {
    pub n_graphs: usize,
    pub n_nodes_avg: f64,
    pub n_edges_avg: f64,
    pub d_max: usize,
    pub d_avg: f64,
    /// Transitivity, `3 * triangles / wedges` pooled over every snapshot.
    pub clustering: f64,
    /// Snapshots without a single wedge.
    pub zero_wedge_graphs: usize,
    pub degenerate_rois: usize,
}

pub fn graph_stats(graphs: &[DynamicGraph]) -> Result<GraphStats> {
    let snaps: Vec<&GraphSnapshot> = graphs.iter().flat_map(|g| g.snapshots.iter()).collect();
    if snaps.is_empty() {
        return Err(Error::data("graph statistics need at least one snapshot"));
    }
    let mut nodes = 0usize;
    let mut edges = 0usize;
    let mut d_max = 0usize;
    let mut triangles = 0u64;
    let mut wedges = 0u64;
    let mut zero_wedge_graphs = 0;
    let mut degenerate_rois = 0;
    for s in &snaps {
        let n = s.adj.n();
        nodes += n;
        edges += s.adj.edge_count();
        d_max = d_max.max((0..n).map(|i| s.adj.degree(i)).max().unwrap_or(0));
        let tc = triad_counts(&s.adj);
        triangles += tc.triangles;
        wedges += tc.wedges;
        if tc.wedges == 0 {
            zero_wedge_graphs += 1;
        }
        degenerate_rois += s.degenerate_rois;
    }
    let count = snaps.len() as f64;
    let n_nodes_avg = nodes as f64 / count;
    let n_edges_avg = edges as f64 / count;
    let clustering = if wedges == 0 {
        0.0
    } else {
        3.0 * triangles as f64 / wedges as f64
    };
    Ok(GraphStats {
        n_graphs: snaps.len(),
        n_nodes_avg,
        n_edges_avg,
        d_max,
        d_avg: 2.0 * n_edges_avg / n_nodes_avg,
        clustering,
        zero_wedge_graphs,
        degenerate_rois,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"STDG";
const CACHE_VERSION: u32 = 1;

/// Writes a graph in the cache layout (all little-endian):
///
/// ```text
/// "STDG"  u32 version  u32 N  u32 T  u32 window  u32 stride  f32 frac
/// u32 id_len  id_len bytes of UTF-8 subject id
/// T times:
///   u32 t  u32 degenerate_rois
///   ceil(P/8) bytes adjacency bitset, P = N(N-1)/2, strict upper triangle
///             row-major, pair p at byte p/8, bit p%8 (LSB first)
///   P x f32 correlation, strict upper triangle row-major
///   N x f32 window-mean signal
/// ```
pub fn write_graph_cache(g: &DynamicGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = g.n_rois;
    let pairs = n * n.saturating_sub(1) / 2;
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        n as u32,
        g.len() as u32,
        g.window as u32,
        g.stride as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(g.frac as f32).to_le_bytes());
    buf.extend_from_slice(&(g.subject_id.len() as u32).to_le_bytes());
    buf.extend_from_slice(g.subject_id.as_bytes());
    for snap in &g.snapshots {
        buf.extend_from_slice(&(snap.t as u32).to_le_bytes());
        buf.extend_from_slice(&(snap.degenerate_rois as u32).to_le_bytes());
        let mut bits = vec![0u8; pairs.div_ceil(8)];
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                if snap.adj.has_edge(i, j) {
                    bits[p / 8] |= 1 << (p % 8);
                }
                p += 1;
            }
        }
        buf.extend_from_slice(&bits);
        for i in 0..n {
            for j in i + 1..n {
                buf.extend_from_slice(&(snap.corr[[i, j]] as f32).to_le_bytes());
            }
        }
        for &m in &snap.mean_signal {
            buf.extend_from_slice(&(m as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        if self.pos + len > self.buf.len() {
            return Err(Error::Format("graph cache truncated".into()));
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Reads a graph written by [`write_graph_cache`]. Correlations and mean
/// signals come back at 32-bit precision; the adjacency is exact.
pub fn read_graph_cache(path: impl AsRef<Path>) -> Result<DynamicGraph> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a graph cache",
            path.display()
        )));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported graph cache version {version}"
        )));
    }
    let n = c.u32()? as usize;
    let count = c.u32()? as usize;
    let window = c.u32()? as usize;
    let stride = c.u32()? as usize;
    let frac = c.f32()? as f64;
    let id_len = c.u32()? as usize;
    let subject_id = String::from_utf8(c.take(id_len)?.to_vec())
        .map_err(|_| Error::Format("subject id is not UTF-8".into()))?;
    let pairs = n * n.saturating_sub(1) / 2;
    let mut snapshots = Vec::with_capacity(count);
    for _ in 0..count {
        let t = c.u32()? as usize;
        let degenerate_rois = c.u32()? as usize;
        let bits = c.take(pairs.div_ceil(8))?.to_vec();
        let mut adj = Adjacency::empty(n);
        let mut corr = Mat::eye(n);
        let mut p = 0;
        for i in 0..n {
            for j in i + 1..n {
                if bits[p / 8] >> (p % 8) & 1 == 1 {
                    adj.set(i, j, true);
                }
                p += 1;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let r = c.f32()? as f64;
                corr[[i, j]] = r;
                corr[[j, i]] = r;
            }
        }
        let mean_signal = (0..n)
            .map(|_| c.f32().map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        snapshots.push(GraphSnapshot {
            t,
            corr,
            adj,
            mean_signal,
            degenerate_rois,
        });
    }
    Ok(DynamicGraph {
        subject_id,
        snapshots,
        window,
        stride,
        frac,
        n_rois: n,
    })
}
