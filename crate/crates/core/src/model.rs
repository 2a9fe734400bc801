//! Differentiable model components.
//!
//! A [`Model`] owns a [`ModelConfig`] and a [`ParamStore`] of named
//! tensors. Forward passes run inside a [`Session`], which records onto a
//! fresh [`Tape`] and exposes each component: time encoder, node
//! featurizer, GIN encoder, node/edge decoders, SERO readout and the
//! prediction head. All matrices use the row convention: node `v` is row
//! `v`, and linear maps act as `x · W + b`.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dynfc::{Adjacency, DynamicGraph};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{Gradients, Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeEncoderKind {
    /// Gated recurrent unit over window-mean ROI signals.
    Gru,
    /// Learned embedding per window index.
    Positional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpKind {
    /// Two linear layers with a GELU in between.
    Mlp,
    /// Pass-through, no parameters.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    /// Each node's features normalized across the feature axis.
    Layer,
    /// Each feature normalized across the nodes of one graph, removing the
    /// component shared by all nodes.
    Graph,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Classify,
    Regress,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutKind {
    Sero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_rois: usize,
    pub hidden: usize,
    pub n_layers: usize,
    pub gin_eps_learnable: bool,
    pub gin_mlp: MlpKind,
    /// Normalization after the first linear layer of each GIN MLP.
    pub gin_norm: NormKind,
    pub decoder: MlpKind,
    pub time_encoder: TimeEncoderKind,
    /// Table size of the positional time encoder.
    pub max_time_steps: usize,
    pub readout: ReadoutKind,
    /// SERO squeeze ratio: hidden width of the excitation MLP is `hidden / ratio`.
    pub readout_reduction: usize,
    pub head: HeadKind,
}

impl ModelConfig {
    pub fn new(n_rois: usize, hidden: usize) -> Self {
        Self {
            n_rois,
            hidden,
            n_layers: 4,
            gin_eps_learnable: true,
            gin_mlp: MlpKind::Mlp,
            gin_norm: NormKind::Graph,
            decoder: MlpKind::Mlp,
            time_encoder: TimeEncoderKind::Gru,
            max_time_steps: 64,
            readout: ReadoutKind::Sero,
            readout_reduction: 2,
            head: HeadKind::Classify,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rois < 2 {
            return Err(Error::config("model needs at least 2 ROIs"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden dimension must be at least 1"));
        }
        if self.n_layers == 0 {
            return Err(Error::config("encoder needs at least 1 layer"));
        }
        if self.readout_reduction == 0 {
            return Err(Error::config("readout reduction must be at least 1"));
        }
        if self.time_encoder == TimeEncoderKind::Positional && self.max_time_steps == 0 {
            return Err(Error::config(
                "positional time encoder needs max_time_steps > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Group of a parameter: its name up to the first `.`.
    pub fn group(&self, id: ParamId) -> &str {
        let n = self.name(id);
        n.split('.').next().unwrap_or(n)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Overwrites every parameter whose name starts with one of `prefixes`
    /// from `other`, which must hold a same-shaped tensor of that name.
    pub fn copy_from(&mut self, other: &ParamStore, prefixes: &[&str]) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.names.len() {
            let name = &self.names[i];
            if !prefixes
                .iter()
                .any(|p| name == p || name.starts_with(&format!("{p}.")))
            {
                continue;
            }
            let Some(src) = other.id(name) else {
                return Err(Error::data(format!("checkpoint lacks parameter {name}")));
            };
            let src = other.get(src);
            if src.dim() != self.values[i].dim() {
                return Err(Error::data(format!(
                    "parameter {name}: checkpoint shape {:?} differs from model shape {:?}",
                    src.dim(),
                    self.values[i].dim()
                )));
            }
            self.values[i].assign(src);
            copied += 1;
        }
        Ok(copied)
    }
}

/// Gradients aligned with a [`ParamStore`]; parameters the loss does not
/// reach hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<Mat>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.values().iter().map(|m| Mat::zeros(m.dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.values {
            a.mapv_inplace(|x| x * k);
        }
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Mlp {
    first: Linear,
    norm: Option<(ParamId, ParamId)>,
    second: Linear,
}

#[derive(Clone, Debug)]
struct GinLayer {
    eps: Option<ParamId>,
    mlp: Option<Mlp>,
}

#[derive(Clone, Debug)]
struct Gate {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum TimeEncoder {
    Gru {
        input: Linear,
        update: Gate,
        reset: Gate,
        candidate: Gate,
    },
    Positional {
        table: ParamId,
    },
}

#[derive(Clone, Debug)]
struct SeroLayer {
    squeeze: Linear,
    excite: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    w: ParamId,
    mask_token: ParamId,
    time: TimeEncoder,
    gin: Vec<GinLayer>,
    w_sp: ParamId,
    w_tp: ParamId,
    dec_node: Option<Mlp>,
    dec_edge: Option<Mlp>,
    readout: Vec<SeroLayer>,
    head: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: rng::Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let m = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.store.add(name, m)
    }

    fn fill(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Mat::from_elem((rows, cols), v))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.uniform(format!("{name}.w"), fan_in, fan_out, fan_in),
            b: self.uniform(format!("{name}.b"), 1, fan_out, fan_in),
        }
    }

    fn mlp(&mut self, name: &str, kind: MlpKind, dim: usize, norm: NormKind) -> Option<Mlp> {
        match kind {
            MlpKind::Identity => None,
            MlpKind::Mlp => {
                let first = self.linear(&format!("{name}.lin1"), dim, dim);
                let norm = match norm {
                    NormKind::None => None,
                    NormKind::Layer | NormKind::Graph => Some((
                        self.fill(format!("{name}.norm.gain"), 1, dim, 1.0),
                        self.fill(format!("{name}.norm.bias"), 1, dim, 0.0),
                    )),
                };
                let second = self.linear(&format!("{name}.lin2"), dim, dim);
                Some(Mlp {
                    first,
                    norm,
                    second,
                })
            }
        }
    }

    fn gate(&mut self, name: &str, d: usize) -> Gate {
        Gate {
            w: self.uniform(format!("{name}.w"), d, d, d),
            u: self.uniform(format!("{name}.u"), d, d, d),
            b: self.uniform(format!("{name}.b"), 1, d, d),
        }
    }
}

/// Model parameters plus the configuration they were built for.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Model {
    /// Seeded uniform fan-in initialization; `eps` and norm gains start at
    /// 0 and 1.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (n, d) = (cfg.n_rois, cfg.hidden);
        let mut params = ParamStore::default();
        let mut init = Init {
            store: &mut params,
            rng: rng::derive(seed, &[0x1417]),
        };
        let w = init.uniform("W".into(), n + d, d, n + d);
        let mask_token = init.uniform("mask_token".into(), 1, n + d, n + d);
        let time = match cfg.time_encoder {
            TimeEncoderKind::Gru => TimeEncoder::Gru {
                input: init.linear("time.input", n, d),
                update: init.gate("time.update", d),
                reset: init.gate("time.reset", d),
                candidate: init.gate("time.candidate", d),
            },
            TimeEncoderKind::Positional => TimeEncoder::Positional {
                table: init.uniform("time.table".into(), cfg.max_time_steps, d, d),
            },
        };
        let gin = (0..cfg.n_layers)
            .map(|l| GinLayer {
                eps: cfg
                    .gin_eps_learnable
                    .then(|| init.fill(format!("gin.{l}.eps"), 1, 1, 0.0)),
                mlp: init.mlp(&format!("gin.{l}"), cfg.gin_mlp, d, cfg.gin_norm),
            })
            .collect();
        let w_sp = init.uniform("W_sp".into(), d, d, d);
        let w_tp = init.uniform("W_tp".into(), 2 * d, d, 2 * d);
        let dec_node = init.mlp("dec_node", cfg.decoder, d, NormKind::None);
        let dec_edge = init.mlp("dec_edge", cfg.decoder, d, NormKind::None);
        let squeeze_dim = (d / cfg.readout_reduction).max(1);
        let readout = (0..cfg.n_layers)
            .map(|l| SeroLayer {
                squeeze: init.linear(&format!("readout.{l}.squeeze"), d, squeeze_dim),
                excite: init.linear(&format!("readout.{l}.excite"), squeeze_dim, d),
            })
            .collect();
        let head = init.linear("head", cfg.n_layers * d, 1);
        let layout = Layout {
            w,
            mask_token,
            time,
            gin,
            w_sp,
            w_tp,
            dec_node,
            dec_edge,
            readout,
            head,
        };
        Ok(Self {
            cfg,
            params,
            layout,
        })
    }

    pub fn session(&self) -> Session<'_> {
        Session::new(self)
    }

    /// Parameter groups the encoder side consists of; these transfer from a
    /// pre-trained checkpoint into a fine-tuning model.
    pub fn encoder_prefixes() -> &'static [&'static str] {
        &["W", "mask_token", "time", "gin"]
    }

    pub fn w(&self) -> ParamId {
        self.layout.w
    }

    pub fn w_sp(&self) -> ParamId {
        self.layout.w_sp
    }

    pub fn w_tp(&self) -> ParamId {
        self.layout.w_tp
    }

    pub fn head_weight(&self) -> ParamId {
        self.layout.head.w
    }

    pub fn head_bias(&self) -> ParamId {
        self.layout.head.b
    }

    pub fn gin_eps(&self, layer: usize) -> Option<ParamId> {
        self.layout.gin[layer].eps
    }
}

/// Encoder output for one snapshot.
#[derive(Clone, Debug)]
pub struct Encoding {
    /// Final-layer node representations, `N x D`.
    pub z: Var,
    /// Output of every layer, first to last.
    pub layers: Vec<Var>,
}

/// One forward pass of a [`Model`] recorded on a tape.
pub struct Session<'m> {
    pub tape: Tape,
    model: &'m Model,
    vars: Vec<Var>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        let mut tape = Tape::new();
        let vars = model
            .params
            .values()
            .iter()
            .map(|m| tape.leaf(m.clone()))
            .collect();
        Self { tape, model, vars }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    fn linear(&mut self, x: Var, l: &Linear) -> Var {
        let (w, b) = (self.param(l.w), self.param(l.b));
        let xw = self.tape.matmul(x, w);
        self.tape.add_row(xw, b)
    }

    fn mlp(&mut self, x: Var, mlp: Option<&Mlp>) -> Var {
        let Some(mlp) = mlp else { return x };
        let mut h = self.linear(x, &mlp.first);
        if let Some((g, b)) = mlp.norm {
            let (g, b) = (self.param(g), self.param(b));
            h = match self.model.cfg.gin_norm {
                NormKind::Graph => self.graph_norm(h, g, b),
                _ => self.tape.layer_norm(h, g, b),
            };
        }
        let h = self.tape.gelu(h);
        self.linear(h, &mlp.second)
    }

    /// Per-feature normalization over the rows of `h`, then `gain` and `bias`.
    fn graph_norm(&mut self, h: Var, gain: Var, bias: Var) -> Var {
        let n = self.tape.value(h).nrows();
        let ones = self.tape.constant(Mat::ones((1, n)));
        let zeros = self.tape.constant(Mat::zeros((1, n)));
        let ht = self.tape.transpose(h);
        let normed = self.tape.layer_norm(ht, ones, zeros);
        let gain_col = self.tape.transpose(gain);
        let scaled = self.tape.mul_col(normed, gain_col);
        let back = self.tape.transpose(scaled);
        self.tape.add_row(back, bias)
    }

    fn gate(&mut self, x: Var, h: Var, g: &Gate, act: fn(&mut Tape, Var) -> Var) -> Var {
        let (w, u, b) = (self.param(g.w), self.param(g.u), self.param(g.b));
        let xw = self.tape.matmul(x, w);
        let hu = self.tape.matmul(h, u);
        let s = self.tape.add(xw, hu);
        let s = self.tape.add_row(s, b);
        act(&mut self.tape, s)
    }

    /// Time encodings `eta(1..=T)`, each `1 x D`, from the per-window mean
    /// ROI signals. The recurrent encoder is causal: `eta(t)` sees windows
    /// `1..=t` only.
    pub fn encode_time(&mut self, window_means: &[Vec<f64>]) -> Result<Vec<Var>> {
        let d = self.model.cfg.hidden;
        let n = self.model.cfg.n_rois;
        match &self.model.layout.time {
            TimeEncoder::Positional { table } => {
                let cap = self.model.cfg.max_time_steps;
                if window_means.len() > cap {
                    return Err(Error::config(format!(
                        "{} windows exceed the positional encoder's {cap} slots",
                        window_means.len()
                    )));
                }
                let table = self.param(*table);
                Ok((0..window_means.len())
                    .map(|t| self.tape.slice_rows(table, t, 1))
                    .collect())
            }
            TimeEncoder::Gru {
                input,
                update,
                reset,
                candidate,
            } => {
                let (input, update, reset, candidate) = (
                    input.clone(),
                    update.clone(),
                    reset.clone(),
                    candidate.clone(),
                );
                let mut h = self.tape.constant(Mat::zeros((1, d)));
                let mut out = Vec::with_capacity(window_means.len());
                for m in window_means {
                    if m.len() != n {
                        return Err(Error::data(format!(
                            "window summary has {} ROIs, model expects {n}",
                            m.len()
                        )));
                    }
                    let x = self
                        .tape
                        .constant(Mat::from_shape_vec((1, n), m.clone()).expect("row"));
                    let u = self.linear(x, &input);
                    let z = self.gate(u, h, &update, Tape::sigmoid);
                    let r = self.gate(u, h, &reset, Tape::sigmoid);
                    // candidate: tanh(u W + r * (h U) + b)
                    let (cw, cu, cb) = (
                        self.param(candidate.w),
                        self.param(candidate.u),
                        self.param(candidate.b),
                    );
                    let uw = self.tape.matmul(u, cw);
                    let hu = self.tape.matmul(h, cu);
                    let rhu = self.tape.mul(r, hu);
                    let pre = self.tape.add(uw, rhu);
                    let pre = self.tape.add_row(pre, cb);
                    let cand = self.tape.tanh(pre);
                    // h' = (1 - z) * cand + z * h
                    let keep = self.tape.affine(z, -1.0, 1.0);
                    let a = self.tape.mul(keep, cand);
                    let b = self.tape.mul(z, h);
                    h = self.tape.add(a, b);
                    out.push(h);
                }
                Ok(out)
            }
        }
    }

    /// `X(t)`: row `v` is `[e_v || eta(t)] · W`, i.e. `W[v] + eta(t) · W[N..]`.
    pub fn node_features(&mut self, eta: Var) -> Var {
        let n = self.model.cfg.n_rois;
        let d = self.model.cfg.hidden;
        let w = self.param(self.model.layout.w);
        let identity_part = self.tape.slice_rows(w, 0, n);
        let time_part = self.tape.slice_rows(w, n, d);
        let shift = self.tape.matmul(eta, time_part);
        self.tape.add_row(identity_part, shift)
    }

    /// Projection of the learnable mask token, `1 x D`.
    pub fn mask_token_row(&mut self) -> Var {
        let tok = self.param(self.model.layout.mask_token);
        let w = self.param(self.model.layout.w);
        self.tape.matmul(tok, w)
    }

    /// Adjacency as a constant node.
    pub fn adjacency(&mut self, adj: &Adjacency) -> Var {
        self.tape.constant(adj.to_f64())
    }

    /// GIN layers `H <- MLP((1 + eps) H + A H)`.
    pub fn gin_encode(&mut self, x: Var, adj: Var) -> Encoding {
        let mut h = x;
        let model = self.model;
        let mut layers = Vec::with_capacity(model.layout.gin.len());
        for layer in &model.layout.gin {
            let agg = self.tape.matmul(adj, h);
            let mut pre = self.tape.add(h, agg);
            if let Some(eps) = layer.eps {
                let e = self.param(eps);
                let scaled = self.tape.scalar_mul(h, e);
                pre = self.tape.add(pre, scaled);
            }
            h = self.mlp(pre, layer.mlp.as_ref());
            layers.push(h);
        }
        Encoding { z: h, layers }
    }

    /// `Z · W_sp`
    pub fn project_spatial(&mut self, z: Var) -> Var {
        let w = self.param(self.model.layout.w_sp);
        self.tape.matmul(z, w)
    }

    /// `[Z_a || Z_b] · W_tp`
    pub fn project_temporal(&mut self, za: Var, zb: Var) -> Var {
        let w = self.param(self.model.layout.w_tp);
        let cat = self.tape.concat_cols(za, zb);
        self.tape.matmul(cat, w)
    }

    /// Node decoder applied row-wise to an already projected representation.
    pub fn decode_nodes(&mut self, zproj: Var) -> Var {
        let model = self.model;
        self.mlp(zproj, model.layout.dec_node.as_ref())
    }

    /// Edge embedding `H` of an already projected representation.
    pub fn edge_embedding(&mut self, zproj: Var) -> Var {
        let model = self.model;
        self.mlp(zproj, model.layout.dec_edge.as_ref())
    }

    /// `sigmoid(H Hᵀ)` with `H` from the projected representation.
    pub fn edge_probs(&mut self, zproj: Var) -> Var {
        let h = self.edge_embedding(zproj);
        let logits = self.tape.matmul_t(h, h);
        self.tape.sigmoid(logits)
    }

    /// `sigmoid(H Hᵀ)` with `H = F_edge(Z · W_sp)`.
    pub fn decode_edges_same(&mut self, z: Var) -> Var {
        let p = self.project_spatial(z);
        self.edge_probs(p)
    }

    /// `(sigmoid(H_a H_bᵀ) + sigmoid(H_b H_aᵀ)) / 2`.
    pub fn decode_edges_cross(&mut self, za: Var, zb: Var) -> Var {
        let pa = self.project_spatial(za);
        let pb = self.project_spatial(zb);
        let ha = self.edge_embedding(pa);
        let hb = self.edge_embedding(pb);
        let ab = self.tape.matmul_t(ha, hb);
        let ba = self.tape.matmul_t(hb, ha);
        let sab = self.tape.sigmoid(ab);
        let sba = self.tape.sigmoid(ba);
        let both = self.tape.add(sab, sba);
        self.tape.affine(both, 0.5, 0.0)
    }

    /// Node mean weighted by per-node gates (`N x 1`).
    pub fn gated_mean(&mut self, h: Var, gates: Var) -> Var {
        let weighted = self.tape.mul_col(h, gates);
        self.tape.mean_rows(weighted)
    }

    /// SERO readout of every layer, concatenated (jumping knowledge).
    /// Node gates are `sigmoid(h_v · e)` with the excitation vector `e`
    /// computed from the node mean, so the result is node-order invariant.
    pub fn readout(&mut self, layers: &[Var]) -> Var {
        assert!(!layers.is_empty(), "readout over no layers");
        assert!(
            layers.len() <= self.model.layout.readout.len(),
            "more layers than readouts"
        );
        let mut out: Option<Var> = None;
        for (l, &h) in layers.iter().enumerate() {
            let sero = self.model.layout.readout[l].clone();
            let squeezed = self.tape.mean_rows(h);
            let s = self.linear(squeezed, &sero.squeeze);
            let s = self.tape.gelu(s);
            let e = self.linear(s, &sero.excite);
            let logits = self.tape.matmul_t(h, e);
            let gates = self.tape.sigmoid(logits);
            let pooled = self.gated_mean(h, gates);
            out = Some(match out {
                None => pooled,
                Some(prev) => self.tape.concat_cols(prev, pooled),
            });
        }
        out.expect("non-empty")
    }

    /// Temporal mean of readout vectors followed by an affine map to one
    /// output (a logit or a regression value).
    pub fn head(&mut self, g_seq: &[Var]) -> Result<Var> {
        if g_seq.is_empty() {
            return Err(Error::data("prediction head needs at least one time step"));
        }
        let total = self.tape.sum(g_seq);
        let mean = self.tape.affine(total, 1.0 / g_seq.len() as f64, 0.0);
        let head = self.model.layout.head.clone();
        Ok(self.linear(mean, &head))
    }

    /// Full downstream forward pass over an unmasked dynamic graph.
    pub fn predict(&mut self, graph: &DynamicGraph) -> Result<Var> {
        let means: Vec<Vec<f64>> = graph
            .snapshots
            .iter()
            .map(|s| s.mean_signal.clone())
            .collect();
        let etas = self.encode_time(&means)?;
        let mut g_seq = Vec::with_capacity(etas.len());
        for (snap, eta) in graph.snapshots.iter().zip(etas) {
            let x = self.node_features(eta);
            let a = self.adjacency(&snap.adj);
            let enc = self.gin_encode(x, a);
            g_seq.push(self.readout(&enc.layers));
        }
        self.head(&g_seq)
    }

    /// Gradients of the scalar `root` w.r.t. every parameter.
    pub fn param_grads(&self, root: Var) -> ParamGrads {
        let grads: Gradients = self.tape.backward(root);
        ParamGrads {
            values: self
                .model
                .params
                .values()
                .iter()
                .zip(&self.vars)
                .map(|(m, &v)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(m.dim())))
                .collect(),
        }
    }
}
