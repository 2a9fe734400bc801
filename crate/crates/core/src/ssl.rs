//! Masking and the spatio-temporal reconstruction objective.
//!
//! One pre-training step over a dynamic graph draws a subset of interior
//! time steps. For each drawn `t`:
//!
//! * spatial: mask nodes and flip edges of snapshot `t`, encode, and
//!   reconstruct `X(t)` and `A(t)` from `Z(t) · W_sp`;
//! * temporal: draw `t_a < t < t_b`, encode the (unmasked) snapshots at
//!   `t_a` and `t_b`, and reconstruct `X(t)` from `[Z(t_a) || Z(t_b)] · W_tp`
//!   and `A(t)` from the cross edge decoder.
//!
//! The step loss is the spatial sum plus the temporal sum.

use std::collections::HashMap;

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dynfc::{Adjacency, DynamicGraph};
use crate::error::{Error, Result};
use crate::model::{Model, ParamGrads, Session};
use crate::rng::Rng;
use crate::tape::{Mat, Tape, Var};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeMaskMode {
    Zero,
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub node_ratio: f64,
    pub edge_ratio: f64,
    /// Fraction of interior time steps drawn per step.
    pub time_ratio: f64,
    pub node_mode: NodeMaskMode,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            node_ratio: 0.3,
            edge_ratio: 0.3,
            time_ratio: 0.5,
            node_mode: NodeMaskMode::Token,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.node_ratio) || !unit(self.edge_ratio) {
            return Err(Error::config(
                "node and edge mask ratios must lie in [0, 1]",
            ));
        }
        if !(self.time_ratio > 0.0 && self.time_ratio <= 1.0) {
            return Err(Error::config("time mask ratio must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeCriterion {
    Sce,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCriterion {
    Bce,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    Node,
    Edge,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeLossScope {
    /// Spatial node loss over masked nodes only.
    Masked,
    /// Spatial node loss over every node.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    pub mask: MaskConfig,
    /// Exponent of the scaled cosine error.
    pub gamma: f64,
    pub node_criterion: NodeCriterion,
    pub edge_criterion: EdgeCriterion,
    pub recon_target: ReconTarget,
    pub node_scope: NodeLossScope,
    /// Mask the context snapshots of the temporal objective too.
    pub masked_context: bool,
    /// Average the temporal projection over both concatenation orders.
    pub symmetric_concat: bool,
    /// Run spatial-only steps on graphs with fewer than 3 snapshots.
    pub allow_spatial_only: bool,
    /// Treat the node reconstruction target `X(t)` as a constant. `X(t)`
    /// is itself learnable, so without this the node loss can be lowered
    /// by moving the target instead of improving the reconstruction.
    pub detach_target: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            mask: MaskConfig::default(),
            gamma: 2.0,
            node_criterion: NodeCriterion::Sce,
            edge_criterion: EdgeCriterion::Bce,
            recon_target: ReconTarget::Both,
            node_scope: NodeLossScope::Masked,
            masked_context: false,
            symmetric_concat: false,
            allow_spatial_only: false,
            detach_target: false,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if !(self.gamma >= 1.0) {
            return Err(Error::config("SCE exponent must be at least 1"));
        }
        Ok(())
    }

    fn node_on(&self) -> bool {
        self.recon_target != ReconTarget::Edge
    }

    fn edge_on(&self) -> bool {
        self.recon_target != ReconTarget::Node
    }
}

/// Per-step loss components. The sums are exact by construction:
/// `l_spatial = l_sp_node + l_sp_edge`, `l_temporal = l_tp_node + l_tp_edge`,
/// `l_total = l_spatial + l_temporal`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sp_node: f64,
    pub l_sp_edge: f64,
    pub l_tp_node: f64,
    pub l_tp_edge: f64,
    pub l_spatial: f64,
    pub l_temporal: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn from_parts(sp_node: f64, sp_edge: f64, tp_node: f64, tp_edge: f64) -> Self {
        let l_spatial = sp_node + sp_edge;
        let l_temporal = tp_node + tp_edge;
        Self {
            l_sp_node: sp_node,
            l_sp_edge: sp_edge,
            l_tp_node: tp_node,
            l_tp_edge: tp_edge,
            l_spatial,
            l_temporal,
            l_total: l_spatial + l_temporal,
        }
    }

    /// Component-wise mean of several breakdowns, re-summed exactly.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let k = items.len().max(1) as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / k;
        Self::from_parts(
            avg(|b| b.l_sp_node),
            avg(|b| b.l_sp_edge),
            avg(|b| b.l_tp_node),
            avg(|b| b.l_tp_edge),
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_sp_node,
            self.l_sp_edge,
            self.l_tp_node,
            self.l_tp_edge,
            self.l_total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Interior time steps (1-based) to reconstruct:
/// `max(1, round(ratio * (T - 2)))` of them, drawn without replacement from
/// `2..=T-1`, returned in ascending order.
pub fn sample_mask_times(t_len: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if t_len < 3 {
        return Err(Error::data(format!(
            "temporal objective needs at least 3 snapshots, got {t_len}"
        )));
    }
    let interior = t_len - 2;
    let count = ((ratio * interior as f64).round() as usize).clamp(1, interior);
    let mut picked: Vec<usize> = index::sample(rng, interior, count)
        .into_iter()
        .map(|i| i + 2)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Uniform `(t_a, t_b)` with `1 <= t_a < t < t_b <= T`.
pub fn sample_context(t: usize, t_len: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if t < 2 || t + 1 > t_len {
        return Err(Error::data(format!(
            "time step {t} has no flanking context in 1..={t_len}"
        )));
    }
    let ta = rng.random_range(1..t);
    let tb = rng.random_range(t + 1..=t_len);
    Ok((ta, tb))
}

/// Which nodes to mask and which unordered pairs to flip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub nodes: Vec<usize>,
    pub edge_flips: Vec<(usize, usize)>,
}

/// `round(node_ratio * N)` nodes and `round(edge_ratio * N(N-1)/2)` pairs,
/// each drawn uniformly without replacement.
pub fn sample_mask(n: usize, cfg: &MaskConfig, rng: &mut Rng) -> MaskPlan {
    let node_count = ((cfg.node_ratio * n as f64).round() as usize).min(n);
    let mut nodes = index::sample(rng, n, node_count).into_vec();
    nodes.sort_unstable();
    let pairs = n * (n - 1) / 2;
    let flip_count = ((cfg.edge_ratio * pairs as f64).round() as usize).min(pairs);
    let mut flat = index::sample(rng, pairs, flip_count).into_vec();
    flat.sort_unstable();
    let edge_flips = flat.into_iter().map(|p| pair_at(n, p)).collect();
    MaskPlan { nodes, edge_flips }
}

/// The `p`-th unordered pair `(i, j)`, `i < j`, in row-major order.
fn pair_at(n: usize, mut p: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if p < row {
            return (i, i + 1 + p);
        }
        p -= row;
        i += 1;
    }
}

pub fn flip_edges(adj: &Adjacency, flips: &[(usize, usize)]) -> Adjacency {
    let mut out = adj.clone();
    for &(i, j) in flips {
        let on = !out.has_edge(i, j);
        out.set(i, j, on);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSnapshot {
    pub x_m: Mat,
    pub a_m: Adjacency,
    pub node_mask: Vec<usize>,
    pub edge_flips: Vec<(usize, usize)>,
}

/// Masks node rows (zeros, or `token` when given) and flips edge pairs.
pub fn mask_snapshot(
    x: &Mat,
    adj: &Adjacency,
    cfg: &MaskConfig,
    token: Option<&Mat>,
    rng: &mut Rng,
) -> MaskedSnapshot {
    let plan = sample_mask(adj.n(), cfg, rng);
    let mut x_m = x.clone();
    for &v in &plan.nodes {
        match (cfg.node_mode, token) {
            (NodeMaskMode::Token, Some(tok)) => x_m.row_mut(v).assign(&tok.row(0)),
            _ => x_m.row_mut(v).fill(0.0),
        }
    }
    MaskedSnapshot {
        x_m,
        a_m: flip_edges(adj, &plan.edge_flips),
        node_mask: plan.nodes,
        edge_flips: plan.edge_flips,
    }
}

/// A loss value with its local gradients w.r.t. both arguments.
#[derive(Clone, Debug)]
pub struct LossValue {
    pub loss: f64,
    pub grad_target: Mat,
    pub grad_pred: Mat,
    /// Rows left out because the target row has zero norm.
    pub skipped: usize,
}

/// Mean over `rows` of `(1 - cos(target_v, pred_v))^gamma`.
pub fn sce_loss(target: &Mat, pred: &Mat, rows: &[usize], gamma: f64) -> Result<LossValue> {
    if rows.is_empty() {
        return Err(Error::data("scaled cosine error over an empty node set"));
    }
    assert_eq!(target.dim(), pred.dim(), "sce shape");
    let mut grad_target = Mat::zeros(target.dim());
    let mut grad_pred = Mat::zeros(pred.dim());
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut terms = Vec::with_capacity(rows.len());
    for &v in rows {
        let a = target.row(v);
        let b = pred.row(v);
        let na = a.dot(&a).sqrt();
        if na <= f64::MIN_POSITIVE {
            skipped += 1;
            continue;
        }
        let nb = b.dot(&b).sqrt().max(1e-12);
        let cos = a.dot(&b) / (na * nb);
        let gap = (1.0 - cos).max(0.0);
        total += gap.powf(gamma);
        used += 1;
        terms.push((v, na, nb, cos, gap));
    }
    if used == 0 {
        return Ok(LossValue {
            loss: 0.0,
            grad_target,
            grad_pred,
            skipped,
        });
    }
    let scale = 1.0 / used as f64;
    for (v, na, nb, cos, gap) in terms {
        let dl_dcos = -gamma * gap.powf(gamma - 1.0) * scale;
        let a = target.row(v);
        let b = pred.row(v);
        for j in 0..a.len() {
            grad_pred[[v, j]] = dl_dcos * (a[j] / (na * nb) - cos * b[j] / (nb * nb));
            grad_target[[v, j]] = dl_dcos * (b[j] / (na * nb) - cos * a[j] / (na * na));
        }
    }
    Ok(LossValue {
        loss: total * scale,
        grad_target,
        grad_pred,
        skipped,
    })
}

fn off_diagonal_count(n: usize) -> usize {
    n * n.saturating_sub(1)
}

/// Mean binary cross-entropy over off-diagonal entries.
pub fn bce_loss(target: &Mat, probs: &Mat) -> LossValue {
    assert_eq!(target.dim(), probs.dim(), "bce shape");
    let n = target.nrows();
    let count = off_diagonal_count(n).max(1) as f64;
    let mut grad_pred = Mat::zeros(probs.dim());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = target[[i, j]];
            let raw = probs[[i, j]];
            let p = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= a * p.ln() + (1.0 - a) * (1.0 - p).ln();
            if raw > BCE_CLAMP && raw < 1.0 - BCE_CLAMP {
                grad_pred[[i, j]] = (-a / p + (1.0 - a) / (1.0 - p)) / count;
            }
        }
    }
    LossValue {
        loss: total / count,
        grad_target: Mat::zeros(target.dim()),
        grad_pred,
        skipped: 0,
    }
}

/// Mean squared error over the listed rows (all columns).
pub fn mse_rows(target: &Mat, pred: &Mat, rows: &[usize]) -> Result<LossValue> {
    if rows.is_empty() {
        return Err(Error::data("squared error over an empty node set"));
    }
    let d = target.ncols();
    let count = (rows.len() * d) as f64;
    let mut grad_pred = Mat::zeros(pred.dim());
    let mut total = 0.0;
    for &v in rows {
        for j in 0..d {
            let diff = pred[[v, j]] - target[[v, j]];
            total += diff * diff;
            grad_pred[[v, j]] = 2.0 * diff / count;
        }
    }
    let grad_target = -&grad_pred;
    Ok(LossValue {
        loss: total / count,
        grad_target,
        grad_pred,
        skipped: 0,
    })
}

/// Mean squared error over off-diagonal entries.
pub fn mse_off_diagonal(target: &Mat, pred: &Mat) -> LossValue {
    let n = target.nrows();
    let count = off_diagonal_count(n).max(1) as f64;
    let mut grad_pred = Mat::zeros(pred.dim());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let diff = pred[[i, j]] - target[[i, j]];
                total += diff * diff;
                grad_pred[[i, j]] = 2.0 * diff / count;
            }
        }
    }
    LossValue {
        loss: total / count,
        grad_target: Mat::zeros(target.dim()),
        grad_pred,
        skipped: 0,
    }
}

fn push_loss(tape: &mut Tape, target: Var, pred: Var, lv: LossValue) -> Var {
    tape.custom_scalar(
        lv.loss,
        vec![(target, lv.grad_target), (pred, lv.grad_pred)],
    )
}

/// Node reconstruction term on the tape.
pub fn node_loss(
    tape: &mut Tape,
    cfg: &SslConfig,
    target: Var,
    pred: Var,
    rows: &[usize],
) -> Result<Var> {
    let lv = match cfg.node_criterion {
        NodeCriterion::Sce => sce_loss(tape.value(target), tape.value(pred), rows, cfg.gamma)?,
        NodeCriterion::Mse => mse_rows(tape.value(target), tape.value(pred), rows)?,
    };
    if lv.skipped > 0 {
        log::debug!("node loss skipped {} zero-norm target rows", lv.skipped);
    }
    Ok(push_loss(tape, target, pred, lv))
}

/// Edge reconstruction term on the tape; the target is a constant adjacency.
pub fn edge_loss(tape: &mut Tape, cfg: &SslConfig, target: &Adjacency, pred: Var) -> Var {
    let a = target.to_f64();
    let lv = match cfg.edge_criterion {
        EdgeCriterion::Bce => bce_loss(&a, tape.value(pred)),
        EdgeCriterion::Mse => mse_off_diagonal(&a, tape.value(pred)),
    };
    tape.custom_scalar(lv.loss, vec![(pred, lv.grad_pred)])
}

/// Per-graph values shared by all time steps of one step: time encodings,
/// node features and clean encodings, each computed at most once.
pub struct GraphPass<'g> {
    pub graph: &'g DynamicGraph,
    etas: Vec<Var>,
    features: HashMap<usize, Var>,
    clean: HashMap<usize, Var>,
}

impl<'g> GraphPass<'g> {
    pub fn new(session: &mut Session<'_>, graph: &'g DynamicGraph) -> Result<Self> {
        let means: Vec<Vec<f64>> = graph
            .snapshots
            .iter()
            .map(|s| s.mean_signal.clone())
            .collect();
        let etas = session.encode_time(&means)?;
        Ok(Self {
            graph,
            etas,
            features: HashMap::new(),
            clean: HashMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }

    /// Node reconstruction target: `X(t)`, or a constant copy of it when
    /// `cfg.detach_target` is set.
    pub fn target(&mut self, session: &mut Session<'_>, t: usize, cfg: &SslConfig) -> Var {
        let x = self.features(session, t);
        if cfg.detach_target {
            let value = session.tape.value(x).clone();
            session.tape.constant(value)
        } else {
            x
        }
    }

    /// `X(t)` for 1-based `t`.
    pub fn features(&mut self, session: &mut Session<'_>, t: usize) -> Var {
        if let Some(&x) = self.features.get(&t) {
            return x;
        }
        let x = session.node_features(self.etas[t - 1]);
        self.features.insert(t, x);
        x
    }

    /// `Z(t)` of the unmasked snapshot.
    pub fn clean_encoding(&mut self, session: &mut Session<'_>, t: usize) -> Var {
        if let Some(&z) = self.clean.get(&t) {
            return z;
        }
        let x = self.features(session, t);
        let a = session.adjacency(&self.graph.at(t).adj);
        let z = session.gin_encode(x, a).z;
        self.clean.insert(t, z);
        z
    }

    /// `Z(t)` of a freshly masked copy of the snapshot.
    pub fn masked_encoding(
        &mut self,
        session: &mut Session<'_>,
        t: usize,
        cfg: &SslConfig,
        rng: &mut Rng,
    ) -> (Var, MaskPlan) {
        let x = self.features(session, t);
        let snap = self.graph.at(t);
        let plan = sample_mask(snap.adj.n(), &cfg.mask, rng);
        let token = match cfg.mask.node_mode {
            NodeMaskMode::Token if !plan.nodes.is_empty() => Some(session.mask_token_row()),
            _ => None,
        };
        let x_m = session.tape.replace_rows(x, &plan.nodes, token);
        let a_m = session.adjacency(&flip_edges(&snap.adj, &plan.edge_flips));
        (session.gin_encode(x_m, a_m).z, plan)
    }
}

/// Spatial node and edge terms at time `t`.
pub fn spatial_step(
    session: &mut Session<'_>,
    pass: &mut GraphPass<'_>,
    t: usize,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let (z, plan) = pass.masked_encoding(session, t, cfg, rng);
    let x = pass.target(session, t, cfg);
    let proj = session.project_spatial(z);
    let node = if cfg.node_on() {
        let x_hat = session.decode_nodes(proj);
        let all: Vec<usize>;
        let rows = match cfg.node_scope {
            NodeLossScope::Masked if !plan.nodes.is_empty() => &plan.nodes,
            _ => {
                all = (0..pass.graph.n_rois).collect();
                &all
            }
        };
        node_loss(&mut session.tape, cfg, x, x_hat, rows)?
    } else {
        session.tape.constant(Mat::zeros((1, 1)))
    };
    let edge = if cfg.edge_on() {
        let a_hat = session.edge_probs(proj);
        edge_loss(&mut session.tape, cfg, &pass.graph.at(t).adj, a_hat)
    } else {
        session.tape.constant(Mat::zeros((1, 1)))
    };
    Ok((node, edge))
}

/// Temporal node and edge terms at `t` from the given context pair.
pub fn temporal_terms(
    session: &mut Session<'_>,
    pass: &mut GraphPass<'_>,
    t: usize,
    (ta, tb): (usize, usize),
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<(Var, Var)> {
    let (za, zb) = if cfg.masked_context {
        let za = pass.masked_encoding(session, ta, cfg, rng).0;
        let zb = pass.masked_encoding(session, tb, cfg, rng).0;
        (za, zb)
    } else {
        (
            pass.clean_encoding(session, ta),
            pass.clean_encoding(session, tb),
        )
    };
    let x = pass.target(session, t, cfg);
    let node = if cfg.node_on() {
        let mut proj = session.project_temporal(za, zb);
        if cfg.symmetric_concat {
            let swapped = session.project_temporal(zb, za);
            let both = session.tape.add(proj, swapped);
            proj = session.tape.affine(both, 0.5, 0.0);
        }
        let x_hat = session.decode_nodes(proj);
        let all: Vec<usize> = (0..pass.graph.n_rois).collect();
        node_loss(&mut session.tape, cfg, x, x_hat, &all)?
    } else {
        session.tape.constant(Mat::zeros((1, 1)))
    };
    let edge = if cfg.edge_on() {
        let a_hat = session.decode_edges_cross(za, zb);
        edge_loss(&mut session.tape, cfg, &pass.graph.at(t).adj, a_hat)
    } else {
        session.tape.constant(Mat::zeros((1, 1)))
    };
    Ok((node, edge))
}

/// Temporal terms at `t` with a freshly drawn context pair.
pub fn temporal_step(
    session: &mut Session<'_>,
    pass: &mut GraphPass<'_>,
    t: usize,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<((Var, Var), (usize, usize))> {
    let ctx = sample_context(t, pass.len(), rng)?;
    Ok((temporal_terms(session, pass, t, ctx, cfg, rng)?, ctx))
}

/// Records one full step on `session` and returns the total-loss node
/// with its breakdown.
pub fn stmae_forward(
    session: &mut Session<'_>,
    graph: &DynamicGraph,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let t_len = graph.len();
    let mut pass = GraphPass::new(session, graph)?;
    let temporal = t_len >= 3;
    let times = if temporal {
        sample_mask_times(t_len, cfg.mask.time_ratio, rng)?
    } else if cfg.allow_spatial_only && t_len >= 1 {
        log::warn!(
            "subject {:?}: {t_len} snapshots, running the spatial objective only",
            graph.subject_id
        );
        let count = ((cfg.mask.time_ratio * t_len as f64).round() as usize).clamp(1, t_len);
        let mut picked: Vec<usize> = index::sample(rng, t_len, count)
            .into_iter()
            .map(|i| i + 1)
            .collect();
        picked.sort_unstable();
        picked
    } else {
        return Err(Error::data(format!(
            "subject {:?}: temporal objective needs at least 3 snapshots, got {t_len}",
            graph.subject_id
        )));
    };

    let mut sp_node = Vec::new();
    let mut sp_edge = Vec::new();
    let mut tp_node = Vec::new();
    let mut tp_edge = Vec::new();
    for &t in &times {
        let (n, e) = spatial_step(session, &mut pass, t, cfg, rng)?;
        sp_node.push(n);
        sp_edge.push(e);
        if temporal {
            let ((n, e), _) = temporal_step(session, &mut pass, t, cfg, rng)?;
            tp_node.push(n);
            tp_edge.push(e);
        }
    }
    let tape = &mut session.tape;
    let zero = |tape: &mut Tape| tape.constant(Mat::zeros((1, 1)));
    let total_of = |terms: &[Var], tape: &mut Tape| {
        if terms.is_empty() {
            zero(tape)
        } else {
            tape.sum(terms)
        }
    };
    let spn = total_of(&sp_node, tape);
    let spe = total_of(&sp_edge, tape);
    let tpn = total_of(&tp_node, tape);
    let tpe = total_of(&tp_edge, tape);
    let spatial = tape.add(spn, spe);
    let temporal_sum = tape.add(tpn, tpe);
    let total = tape.add(spatial, temporal_sum);
    let breakdown = LossBreakdown::from_parts(
        tape.scalar(spn),
        tape.scalar(spe),
        tape.scalar(tpn),
        tape.scalar(tpe),
    );
    debug_assert!({
        let t = tape.scalar(total);
        breakdown.l_total == t || (breakdown.l_total.is_nan() && t.is_nan())
    });
    Ok((total, breakdown))
}

/// One step's loss breakdown and parameter gradients.
pub fn stmae_step(
    model: &Model,
    graph: &DynamicGraph,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<(LossBreakdown, ParamGrads)> {
    let mut session = model.session();
    let (total, breakdown) = stmae_forward(&mut session, graph, cfg, rng)?;
    Ok((breakdown, session.param_grads(total)))
}

/// Forward-only variant of [`stmae_step`].
pub fn stmae_loss(
    model: &Model,
    graph: &DynamicGraph,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let mut session = model.session();
    Ok(stmae_forward(&mut session, graph, cfg, rng)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    #[test]
    fn three_snapshots_always_pick_the_middle() {
        let mut r = rng::seeded(0);
        for _ in 0..20 {
            assert_eq!(sample_mask_times(3, 0.5, &mut r).unwrap(), vec![2]);
            assert_eq!(sample_context(2, 3, &mut r).unwrap(), (1, 3));
        }
        assert!(sample_mask_times(2, 0.5, &mut r).is_err());
        assert!(sample_context(1, 5, &mut r).is_err());
        assert!(sample_context(5, 5, &mut r).is_err());
    }

    #[test]
    fn mask_time_count() {
        let mut r = rng::seeded(1);
        let ts = sample_mask_times(10, 0.5, &mut r).unwrap();
        assert_eq!(ts.len(), 4);
        assert!(ts.iter().all(|&t| (2..=9).contains(&t)));
    }

    #[test]
    fn pair_enumeration_covers_upper_triangle() {
        let n = 5;
        let pairs: Vec<_> = (0..10).map(|p| pair_at(n, p)).collect();
        let mut expect = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expect.push((i, j));
            }
        }
        assert_eq!(pairs, expect);
    }

    #[test]
    fn mask_extremes() {
        let x = Mat::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        let a = Adjacency::from_edges(4, &[(0, 1), (2, 3)]);
        let mut r = rng::seeded(2);
        let none = MaskConfig {
            node_ratio: 0.0,
            edge_ratio: 0.0,
            ..MaskConfig::default()
        };
        let m = mask_snapshot(&x, &a, &none, None, &mut r);
        assert_eq!((m.x_m, m.a_m), (x.clone(), a.clone()));

        let all = MaskConfig {
            node_ratio: 1.0,
            edge_ratio: 1.0,
            node_mode: NodeMaskMode::Zero,
            ..MaskConfig::default()
        };
        let m = mask_snapshot(&x, &a, &all, None, &mut r);
        assert!(m.x_m.iter().all(|&v| v == 0.0));
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(m.a_m.has_edge(i, j), !a.has_edge(i, j));
                }
            }
        }
        assert!(m.a_m.is_valid());
    }

    #[test]
    fn sce_identities() {
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let rows = [0, 1, 2];
        assert!(sce_loss(&x, &x, &rows, 2.0).unwrap().loss < 1e-24);
        assert!((sce_loss(&x, &(-&x), &rows, 2.0).unwrap().loss - 4.0).abs() < 1e-12);
        assert!(sce_loss(&x, &x, &[], 2.0).is_err());
    }

    #[test]
    fn sce_skips_zero_target_rows() {
        let x = array![[0.0, 0.0], [1.0, 1.0]];
        let y = array![[1.0, 0.0], [-1.0, -1.0]];
        let lv = sce_loss(&x, &y, &[0, 1], 2.0).unwrap();
        assert_eq!(lv.skipped, 1);
        assert!((lv.loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let a = Adjacency::from_edges(4, &[(0, 1), (1, 3)]).to_f64();
        let lv = bce_loss(&a, &Mat::from_elem((4, 4), 0.5));
        assert!((lv.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_at_clamp_boundary() {
        let a = Adjacency::from_edges(3, &[(0, 1)]).to_f64();
        let p = a.mapv(|v| if v == 1.0 { 1.0 } else { 0.0 });
        let lv = bce_loss(&a, &p);
        assert!((lv.loss - (-(1.0 - BCE_CLAMP).ln())).abs() < 1e-15);
    }

    #[test]
    fn breakdown_sums_are_exact() {
        let b = LossBreakdown::from_parts(0.1, 0.2, 0.3, 0.4);
        assert_eq!(b.l_total, b.l_spatial + b.l_temporal);
        assert_eq!(b.l_spatial, b.l_sp_node + b.l_sp_edge);
    }
}
