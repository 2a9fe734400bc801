//! Optimizer, learning-rate schedules, checkpoints and the pre-training,
//! fine-tuning and gradient-check drivers.
//!
//! Determinism: every random choice draws from a stream derived from
//! `(seed, purpose, epoch, subject)`. Per-subject work in a batch runs in
//! parallel and the results are reduced in batch order, so a run is
//! bit-identical regardless of thread count.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{GraphConfig, RunConfig};
use crate::dynfc::{build_dynamic_graph, window_count, DynamicGraph};
use crate::error::{Error, Result};
use crate::eval::{self, MetricReport, MetricSummary};
use crate::ingest::{sample_segment, synth_subjects, Dataset, FoldSplit, Subject, SynthSpec};
use crate::model::{HeadKind, Model, ModelConfig, ParamGrads, ParamStore};
use crate::rng::{self, Rng};
use crate::ssl::{stmae_loss, stmae_step, LossBreakdown, SslConfig};
use crate::tape::Mat;

// Stream tags for `rng::derive`.
const ORDER: u64 = 1;
const STEP: u64 = 2;
const SUBSET: u64 = 3;
const INIT: u64 = 4;
const LABELS: u64 = 5;
const GRAD_CHECK: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    #[serde(rename = "onecycle")]
    OneCycle,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Shrink parameters directly, outside the adaptive update.
    Decoupled,
    /// Add `weight_decay * p` to the gradient.
    Coupled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: Schedule,
    pub onecycle_peak: f64,
    pub onecycle_floor: f64,
    pub onecycle_warm_frac: f64,
    pub seed: u64,
    /// Timepoints per random training segment; 0 uses the whole series.
    pub segment_length: usize,
    /// Fraction of each training fold whose labels are used (fine-tuning).
    pub label_fraction: f64,
    /// Keep encoder parameters fixed during fine-tuning.
    pub freeze_encoder: bool,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 1e-4,
            decay_mode: DecayMode::Decoupled,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            epochs: 100,
            schedule: Schedule::Cosine,
            onecycle_peak: 1e-3,
            onecycle_floor: 5e-7,
            onecycle_warm_frac: 0.2,
            seed: 0,
            segment_length: 0,
            label_fraction: 1.0,
            freeze_encoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr and weight_decay must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.onecycle_warm_frac > 0.0 && self.onecycle_warm_frac < 1.0) {
            return Err(Error::config("onecycle_warm_frac must lie in (0, 1)"));
        }
        if !(self.onecycle_floor < self.onecycle_peak) {
            return Err(Error::config("onecycle_floor must be below onecycle_peak"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config("label_fraction must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain_default()
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, base: f64) -> Result<f64> {
    check_step(step, total)?;
    let p = step as f64 / total as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
}

/// Linear warm-up from `cfg.lr` to `cfg.onecycle_peak` over the first
/// `onecycle_warm_frac` of the steps, then cosine decay to `onecycle_floor`.
pub fn onecycle_lr(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    check_step(step, total)?;
    let (start, peak, floor) = (cfg.lr, cfg.onecycle_peak, cfg.onecycle_floor);
    let warm = cfg.onecycle_warm_frac * total as f64;
    let s = step as f64;
    if s <= warm {
        let frac = s / warm;
        Ok(peak - (peak - start) * (1.0 - frac))
    } else {
        let p = (s - warm) / (total as f64 - warm);
        let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        Ok(c * peak + (1.0 - c) * floor)
    }
}

fn check_step(step: usize, total: usize) -> Result<()> {
    if total == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if step > total {
        return Err(Error::config(format!(
            "step {step} beyond schedule length {total}"
        )));
    }
    Ok(())
}

pub fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> Result<f64> {
    match cfg.schedule {
        Schedule::Cosine => cosine_lr(step, total, cfg.lr),
        Schedule::OneCycle => onecycle_lr(step, total, cfg),
        Schedule::Constant => {
            check_step(step, total)?;
            Ok(cfg.lr)
        }
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Mat::zeros(p.dim()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub mode: DecayMode,
}

impl Adam {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            mode: cfg.decay_mode,
        }
    }

    /// One update of every parameter with `trainable[i]` set (all when
    /// `trainable` is empty).
    pub fn step(
        &self,
        state: &mut AdamState,
        params: &mut ParamStore,
        grads: &ParamGrads,
        lr: f64,
        trainable: &[bool],
    ) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let wd = self.weight_decay;
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            if !trainable.is_empty() && !trainable[i] {
                continue;
            }
            let g = &grads.values[i];
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = match self.mode {
                        DecayMode::Coupled => g + wd * *p,
                        DecayMode::Decoupled => g,
                    };
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    if self.mode == DecayMode::Decoupled && wd != 0.0 {
                        *p -= lr * wd * *p;
                    }
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                });
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STMAECKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Model parameters plus everything needed to resume.
///
/// File layout (all integers little-endian):
///
/// ```text
/// magic      8 bytes  "STMAECKP"
/// version    u32
/// header_len u64
/// header     header_len bytes of UTF-8 JSON: format_version, dtype ("f64"),
///            model config, epoch, rng {seed, next_epoch}, optimizer step,
///            run config, and a tensor table of {name, section, shape, offset}
/// payload    f64 values; tensor `i` starts at element `offset` and holds
///            rows * cols values in row-major order
/// ```
///
/// Sections are `param`, `adam_m` and `adam_v`.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    pub config: Value,
}

#[derive(Serialize, Deserialize)]
struct RngInfo {
    seed: u64,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    section: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dtype: String,
    model: ModelConfig,
    epoch: usize,
    rng: RngInfo,
    optimizer_step: Option<u64>,
    config: Value,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: &str, section: &str, m: &Mat, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                section: section.to_string(),
                shape: [m.nrows(), m.ncols()],
                offset: payload.len(),
            });
            payload.extend(m.iter());
        };
        let names: Vec<&str> = self.model.params.iter().map(|(n, _)| n).collect();
        for (name, m) in self.model.params.iter() {
            push(name, "param", m, &mut tensors);
        }
        if let Some(opt) = &self.optimizer {
            for (name, m) in names.iter().zip(&opt.m) {
                push(name, "adam_m", m, &mut tensors);
            }
            for (name, v) in names.iter().zip(&opt.v) {
                push(name, "adam_v", v, &mut tensors);
            }
        }
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            dtype: "f64".into(),
            model: self.model.cfg.clone(),
            epoch: self.epoch,
            rng: RngInfo {
                seed: self.seed,
                next_epoch: self.epoch,
            },
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            config: self.config.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + header_len)
            .ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.dtype != "f64" {
            return Err(bad(&format!("unsupported dtype {:?}", header.dtype)));
        }
        let payload = &bytes[20 + header_len..];
        if payload.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let read = |e: &TensorEntry| -> Result<Mat> {
            let count = e.shape[0] * e.shape[1];
            let start = e.offset * 8;
            let raw = payload
                .get(start..start + count * 8)
                .ok_or_else(|| bad(&format!("tensor {} runs past the payload", e.name)))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Mat::from_shape_vec((e.shape[0], e.shape[1]), values).expect("shape"))
        };

        let mut model = Model::new(header.model.clone(), 0)?;
        let n = model.params.len();
        let mut m = vec![None; n];
        let mut v = vec![None; n];
        let mut seen = vec![false; n];
        for e in &header.tensors {
            let id = model
                .params
                .id(&e.name)
                .ok_or_else(|| bad(&format!("unknown tensor {}", e.name)))?;
            let value = read(e)?;
            if value.dim() != model.params.get(id).dim() {
                return Err(bad(&format!("tensor {} has the wrong shape", e.name)));
            }
            match e.section.as_str() {
                "param" => {
                    *model.params.get_mut(id) = value;
                    seen[id.index()] = true;
                }
                "adam_m" => m[id.index()] = Some(value),
                "adam_v" => v[id.index()] = Some(value),
                other => return Err(bad(&format!("unknown section {other}"))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let id = model.params.ids().nth(i).expect("id");
            return Err(bad(&format!("parameter {} missing", model.params.name(id))));
        }
        let optimizer = match header.optimizer_step {
            None => None,
            Some(step) => {
                let m: Option<Vec<Mat>> = m.into_iter().collect();
                let v: Option<Vec<Mat>> = v.into_iter().collect();
                match (m, v) {
                    (Some(m), Some(v)) => Some(AdamState { step, m, v }),
                    _ => return Err(bad("optimizer state incomplete")),
                }
            }
        };
        Ok(Self {
            model,
            optimizer,
            epoch: header.epoch,
            seed: header.rng.seed,
            config: header.config,
        })
    }

    /// Writes through a temporary file and renames, so a crash never
    /// leaves a half-written checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One row of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub l_sp_node: f64,
    pub l_sp_edge: f64,
    pub l_tp_node: f64,
    pub l_tp_edge: f64,
    pub l_total: f64,
    pub lr: f64,
}

impl LossRecord {
    fn new(epoch: usize, step: usize, b: &LossBreakdown, lr: f64) -> Self {
        Self {
            epoch,
            step,
            l_sp_node: b.l_sp_node,
            l_sp_edge: b.l_sp_edge,
            l_tp_node: b.l_tp_node,
            l_tp_edge: b.l_tp_edge,
            l_total: b.l_total,
            lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossRecord>,
    /// Mean `l_total` per epoch.
    pub epoch_means: Vec<f64>,
    /// Ids of the subjects used.
    pub subjects: Vec<String>,
}

/// Indices of a deterministic subset of `round(frac * n)` subjects (at
/// least one), in ascending order.
pub fn subset_indices(n: usize, frac: f64, seed: u64) -> Vec<usize> {
    let count = ((frac * n as f64).round() as usize).clamp(1, n.max(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::derive(seed, &[SUBSET]));
    let mut out = idx[..count.min(n)].to_vec();
    out.sort_unstable();
    out
}

/// Graphs of the full series, one per subject.
pub fn full_graphs(ds: &Dataset, graph: &GraphConfig) -> Result<Vec<DynamicGraph>> {
    ds.subjects
        .par_iter()
        .map(|s| build_dynamic_graph(&s.series, graph.window, graph.stride, graph.frac))
        .collect()
}

fn check_lengths(
    ds: &Dataset,
    graph: &GraphConfig,
    segment: usize,
    min_snapshots: usize,
) -> Result<()> {
    let mut bad = Vec::new();
    for s in &ds.subjects {
        let total = s.series.n_timepoints();
        let len = if segment == 0 { total } else { segment };
        if len > total
            || len < graph.window
            || window_count(len, graph.window, graph.stride) < min_snapshots
        {
            bad.push(format!("{} ({total} timepoints)", s.id()));
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::data(format!(
            "segment length {segment} with window {}/stride {} does not give {min_snapshots} snapshots for: {}",
            graph.window,
            graph.stride,
            bad.join(", ")
        )))
    }
}

/// Graph of a fresh random segment, or the cached full-series graph.
fn training_graph(
    subject: &Subject,
    cached: Option<&DynamicGraph>,
    graph: &GraphConfig,
    segment: usize,
    rng: &mut Rng,
) -> Result<DynamicGraph> {
    match cached {
        Some(g) => Ok(g.clone()),
        None => {
            let (seg, _) = sample_segment(&subject.series, segment, rng)?;
            build_dynamic_graph(&seg, graph.window, graph.stride, graph.frac)
        }
    }
}

fn needs_segments(ds: &Dataset, segment: usize) -> bool {
    segment != 0
        && ds
            .subjects
            .iter()
            .any(|s| s.series.n_timepoints() != segment)
}

struct LossLog {
    writer: Option<csv::Writer<BufWriter<File>>>,
}

impl LossLog {
    fn open(out: Option<&Path>) -> Result<Self> {
        let writer = match out {
            None => None,
            Some(dir) => {
                let path = dir.join("loss_log.csv");
                let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some(csv::Writer::from_writer(BufWriter::new(file)))
            }
        };
        Ok(Self { writer })
    }

    fn push(&mut self, rec: &LossRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.serialize(rec)?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("loss_log.csv", e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    subjects: Vec<&'a str>,
    losses: Vec<LossBreakdown>,
    non_finite_gradients: Vec<&'a str>,
    non_finite_params: Vec<&'a str>,
}

fn nan_abort(out: Option<&Path>, dump: NanDump<'_>) -> Error {
    let detail = format!("batch {:?}", dump.subjects);
    if let Some(dir) = out {
        let path = dir.join("nan_dump.json");
        match serde_json::to_vec_pretty(&dump) {
            Ok(bytes) => {
                if let Err(e) = fs::write(&path, bytes) {
                    log::error!("could not write {}: {e}", path.display());
                }
            }
            Err(e) => log::error!("could not serialize NaN dump: {e}"),
        }
    }
    Error::NonFinite {
        epoch: dump.epoch,
        step: dump.step,
        detail,
    }
}

/// Self-supervised pre-training over `round(ssl_fraction * n)` subjects.
/// When `out` is given, writes `loss_log.csv`, refreshes `checkpoint.bin`
/// after every epoch and `nan_dump.json` on a non-finite loss.
pub fn pretrain(ds: &Dataset, cfg: &RunConfig, out: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("pre-training needs at least one subject"));
    }
    let tc = &cfg.pretrain;
    let ds = ds.select(&subset_indices(ds.len(), cfg.ssl_fraction, tc.seed));
    let min_snapshots = if cfg.ssl.allow_spatial_only { 1 } else { 3 };
    check_lengths(&ds, &cfg.graph, tc.segment_length, min_snapshots)?;
    let model_cfg = cfg.model_for(ds.n_rois().expect("non-empty"))?;
    let mut model = Model::new(model_cfg, tc.seed)?;
    let cached = if needs_segments(&ds, tc.segment_length) {
        None
    } else {
        Some(full_graphs(&ds, &cfg.graph)?)
    };

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log_file = LossLog::open(out)?;
    let adam = Adam::from_config(tc);
    let mut state = AdamState::new(&model.params);
    let steps_per_epoch = ds.len().div_ceil(tc.batch_size);
    let total_steps = (tc.epochs * steps_per_epoch).max(1);
    let config_json = serde_json::to_value(cfg)?;
    let mut log = Vec::with_capacity(tc.epochs * steps_per_epoch);
    let mut epoch_means = Vec::with_capacity(tc.epochs);
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng::derive(tc.seed, &[ORDER, epoch as u64]));
        let mut epoch_total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let results: Vec<Result<(LossBreakdown, ParamGrads)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = rng::derive(tc.seed, &[STEP, epoch as u64, i as u64]);
                    let subject = &ds.subjects[i];
                    let g = training_graph(
                        subject,
                        cached.as_ref().map(|c| &c[i]),
                        &cfg.graph,
                        tc.segment_length,
                        &mut r,
                    )?;
                    stmae_step(&model, &g, &cfg.ssl, &mut r)
                })
                .collect();
            let mut grads = ParamGrads::zeros_like(&model.params);
            let mut parts = Vec::with_capacity(batch.len());
            for res in results {
                let (b, g) = res?;
                grads.add_assign(&g);
                parts.push(b);
            }
            grads.scale(1.0 / batch.len() as f64);
            let lr = lr_at(tc, step, total_steps)?;
            let mean = LossBreakdown::mean(&parts);
            if !mean.is_finite() || !grads.all_finite() {
                let names = |pred: &dyn Fn(usize) -> bool| {
                    model
                        .params
                        .ids()
                        .filter(|id| pred(id.index()))
                        .map(|id| model.params.name(id))
                        .collect::<Vec<_>>()
                };
                let dump = NanDump {
                    epoch,
                    step,
                    lr,
                    subjects: batch.iter().map(|&i| ds.subjects[i].id()).collect(),
                    losses: parts.clone(),
                    non_finite_gradients: names(&|i| {
                        grads.values[i].iter().any(|v| !v.is_finite())
                    }),
                    non_finite_params: names(&|i| {
                        model.params.values()[i].iter().any(|v| !v.is_finite())
                    }),
                };
                return Err(nan_abort(out, dump));
            }
            adam.step(&mut state, &mut model.params, &grads, lr, &[]);
            let rec = LossRecord::new(epoch, step, &mean, lr);
            log_file.push(&rec)?;
            log.push(rec);
            epoch_total += mean.l_total * batch.len() as f64;
            step += 1;
        }
        let mean = epoch_total / ds.len() as f64;
        epoch_means.push(mean);
        log::info!("pretrain epoch {epoch}: mean l_total {mean:.6}");
        log_file.flush()?;
        if let Some(dir) = out {
            let ckpt = Checkpoint {
                model: model.clone(),
                optimizer: Some(state.clone()),
                epoch: epoch + 1,
                seed: tc.seed,
                config: config_json.clone(),
            };
            ckpt.save(dir.join("checkpoint.bin"))?;
        }
    }

    let checkpoint = Checkpoint {
        model,
        optimizer: Some(state),
        epoch: tc.epochs,
        seed: tc.seed,
        config: config_json,
    };
    if let Some(dir) = out {
        checkpoint.save(dir.join("checkpoint.bin"))?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        log,
        epoch_means,
        subjects: ds.subjects.iter().map(|s| s.id().to_string()).collect(),
    })
}

/// A held-out prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subject_id: String,
    pub fold: usize,
    /// Logit for classification, value for regression.
    pub score: f64,
    pub label: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub task: HeadKind,
    pub folds: Vec<MetricReport>,
    pub summary: MetricSummary,
    pub predictions: Vec<Prediction>,
    /// Mean training loss per fold and epoch.
    pub train_loss: Vec<Vec<f64>>,
}

fn label_of(s: &Subject, task: HeadKind) -> Option<f64> {
    match task {
        HeadKind::Classify => s.labels.class.map(f64::from),
        HeadKind::Regress => s.labels.target,
    }
}

/// Labeled training subset of a fold: a stratified (classification) or
/// plain random draw of `round(frac * n)` subjects, at least one per class.
fn label_subset(
    ds: &Dataset,
    train: &[usize],
    task: HeadKind,
    frac: f64,
    seed: u64,
    fold: usize,
) -> Vec<usize> {
    if frac >= 1.0 {
        return train.to_vec();
    }
    let mut rng = rng::derive(seed, &[LABELS, fold as u64]);
    let mut groups: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    for &i in train {
        let key = match task {
            HeadKind::Classify => ds.subjects[i].labels.class.map(i64::from).unwrap_or(-1),
            HeadKind::Regress => 0,
        };
        groups.entry(key).or_default().push(i);
    }
    let mut out = Vec::new();
    for (_, mut g) in groups {
        g.shuffle(&mut rng);
        let take = ((frac * g.len() as f64).round() as usize).clamp(1, g.len());
        out.extend_from_slice(&g[..take]);
    }
    out.sort_unstable();
    out
}

/// Logistic loss on a logit, or squared error on a regression output.
fn supervised_loss(task: HeadKind, z: f64, y: f64) -> (f64, f64) {
    match task {
        HeadKind::Classify => {
            // softplus(z) - y z, computed without overflow
            let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
            (sp - y * z, crate::tape::sigmoid(z) - y)
        }
        HeadKind::Regress => ((z - y) * (z - y), 2.0 * (z - y)),
    }
}

/// Seed of the randomly initialized model of a fold. Shared by the
/// pre-trained and the baseline path, so they differ only in the copied
/// encoder weights.
pub fn fold_init_seed(seed: u64, fold: usize) -> u64 {
    rng::derive(seed, &[INIT, fold as u64]).next_u64()
}

/// Per-fold fine-tuning and held-out evaluation. `ckpt = None` trains the
/// supervised baseline from scratch through the same code path.
pub fn finetune(
    ds: &Dataset,
    ckpt: Option<&Checkpoint>,
    task: HeadKind,
    folds: &FoldSplit,
    cfg: &RunConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("fine-tuning needs at least one subject"));
    }
    let missing: Vec<&str> = ds
        .subjects
        .iter()
        .filter(|s| label_of(s, task).is_none())
        .map(|s| s.id())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "{} subjects lack a {} label: {}",
            missing.len(),
            match task {
                HeadKind::Classify => "class",
                HeadKind::Regress => "target",
            },
            missing.join(", ")
        )));
    }
    let fold_of: Vec<usize> = ds
        .subjects
        .iter()
        .map(|s| {
            folds
                .fold_of(s.id())
                .ok_or_else(|| Error::data(format!("subject {:?} has no fold", s.id())))
        })
        .collect::<Result<_>>()?;
    let tc = &cfg.finetune;
    check_lengths(ds, &cfg.graph, tc.segment_length, 1)?;
    let mut model_cfg = cfg.model_for(ds.n_rois().expect("non-empty"))?;
    model_cfg.head = task;
    if let Some(c) = ckpt {
        let theirs = &c.model.cfg;
        if theirs.n_rois != model_cfg.n_rois
            || theirs.hidden != model_cfg.hidden
            || theirs.n_layers != model_cfg.n_layers
        {
            return Err(Error::config(format!(
                "checkpoint model ({} ROIs, hidden {}, {} layers) does not match ({} ROIs, hidden {}, {} layers)",
                theirs.n_rois, theirs.hidden, theirs.n_layers, model_cfg.n_rois, model_cfg.hidden, model_cfg.n_layers
            )));
        }
    }
    let full = full_graphs(ds, &cfg.graph)?;
    let segments = needs_segments(ds, tc.segment_length);

    let results: Vec<Result<(MetricReport, Vec<Prediction>, Vec<f64>)>> = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let test: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] == fold).collect();
            let train_all: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] != fold).collect();
            let train = label_subset(ds, &train_all, task, tc.label_fraction, tc.seed, fold);
            assert!(
                train.iter().all(|i| fold_of[*i] != fold),
                "training set of fold {fold} overlaps its held-out set"
            );
            if test.is_empty() || train.is_empty() {
                return Err(Error::data(format!(
                    "fold {fold} has an empty train or test set"
                )));
            }
            let mut model = Model::new(model_cfg.clone(), fold_init_seed(tc.seed, fold))?;
            if let Some(c) = ckpt {
                model
                    .params
                    .copy_from(&c.model.params, Model::encoder_prefixes())?;
            }
            let trainable: Vec<bool> = model
                .params
                .ids()
                .map(|id| {
                    !(tc.freeze_encoder
                        && Model::encoder_prefixes().contains(&model.params.group(id)))
                })
                .collect();
            let adam = Adam::from_config(tc);
            let mut state = AdamState::new(&model.params);
            let steps_per_epoch = train.len().div_ceil(tc.batch_size);
            let total = (tc.epochs * steps_per_epoch).max(1);
            let mut step = 0;
            let mut losses = Vec::with_capacity(tc.epochs);
            for epoch in 0..tc.epochs {
                let mut order = train.clone();
                order.shuffle(&mut rng::derive(
                    tc.seed,
                    &[ORDER, fold as u64, epoch as u64],
                ));
                let mut epoch_loss = 0.0;
                for batch in order.chunks(tc.batch_size) {
                    let results: Vec<Result<(f64, ParamGrads)>> = batch
                        .par_iter()
                        .map(|&i| {
                            let mut r =
                                rng::derive(tc.seed, &[STEP, fold as u64, epoch as u64, i as u64]);
                            let s = &ds.subjects[i];
                            let g = training_graph(
                                s,
                                (!segments).then(|| &full[i]),
                                &cfg.graph,
                                tc.segment_length,
                                &mut r,
                            )?;
                            let mut sess = model.session();
                            let out = sess.predict(&g)?;
                            let y = label_of(s, task).expect("checked");
                            let (loss, dz) = supervised_loss(task, sess.tape.scalar(out), y);
                            let root = sess
                                .tape
                                .custom_scalar(loss, vec![(out, Mat::from_elem((1, 1), dz))]);
                            Ok((loss, sess.param_grads(root)))
                        })
                        .collect();
                    let mut grads = ParamGrads::zeros_like(&model.params);
                    let mut batch_loss = 0.0;
                    for res in results {
                        let (l, g) = res?;
                        batch_loss += l;
                        grads.add_assign(&g);
                    }
                    grads.scale(1.0 / batch.len() as f64);
                    if !batch_loss.is_finite() || !grads.all_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            step,
                            detail: format!("fine-tuning fold {fold}"),
                        });
                    }
                    let lr = lr_at(tc, step, total)?;
                    adam.step(&mut state, &mut model.params, &grads, lr, &trainable);
                    epoch_loss += batch_loss;
                    step += 1;
                }
                losses.push(epoch_loss / train.len() as f64);
            }

            let preds: Vec<Prediction> = test
                .par_iter()
                .map(|&i| {
                    let mut sess = model.session();
                    let out = sess.predict(&full[i])?;
                    Ok(Prediction {
                        subject_id: ds.subjects[i].id().to_string(),
                        fold,
                        score: sess.tape.scalar(out),
                        label: label_of(&ds.subjects[i], task).expect("checked"),
                    })
                })
                .collect::<Result<_>>()?;
            let report = eval::report_for(task, fold, &preds)?;
            Ok((report, preds, losses))
        })
        .collect();

    let mut reports = Vec::with_capacity(folds.k);
    let mut predictions = Vec::with_capacity(ds.len());
    let mut train_loss = Vec::with_capacity(folds.k);
    for r in results {
        let (rep, preds, losses) = r?;
        reports.push(rep);
        predictions.extend(preds);
        train_loss.push(losses);
    }
    let summary = eval::summarize(&reports)?;
    Ok(FinetuneOutcome {
        task,
        folds: reports,
        summary,
        predictions,
        train_loss,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Every checked entry had a (numerically) zero gradient.
    pub zero_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub groups: Vec<GroupCheck>,
    /// Groups the loss does not reach, e.g. the head during pre-training.
    pub flagged: Vec<String>,
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub snapshots: usize,
    pub samples_per_group: usize,
    pub step_size: f64,
    /// Gradients below this magnitude (analytic and numeric) count as zero.
    pub zero_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            snapshots: 5,
            samples_per_group: 20,
            step_size: 1e-6,
            zero_tol: 1e-10,
        }
    }
}

/// A small synthetic dynamic graph with exactly `snapshots` windows of 16
/// timepoints at stride 3.
pub fn tiny_graph(n_rois: usize, snapshots: usize, seed: u64) -> Result<DynamicGraph> {
    let graph = GraphConfig::clinical_like();
    let needed = graph.window + graph.stride * snapshots.saturating_sub(1);
    let spec = SynthSpec {
        communities: n_rois.clamp(1, 4),
        reference_window: graph.window,
        ..SynthSpec::default()
    };
    let subjects = synth_subjects(2, n_rois.max(4), needed.max(2 * graph.window), seed, &spec)?;
    let mut series = subjects[0].series.columns(0, needed)?;
    if n_rois < 4 {
        let data = series.data().slice(ndarray::s![..n_rois, ..]).to_owned();
        series = crate::ingest::RoiTimeSeries::new(series.subject_id.clone(), data)?;
    }
    build_dynamic_graph(&series, graph.window, graph.stride, graph.frac)
}

/// Central finite differences of `l_total` on random scalar entries of
/// every parameter group, against the analytic gradient.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|)`; entries
/// where both are below `zero_tol` count as zero and are skipped.
pub fn grad_check(
    model_cfg: &ModelConfig,
    ssl: &SslConfig,
    seed: u64,
    opts: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let graph = tiny_graph(model_cfg.n_rois, opts.snapshots, seed)?;
    let mut model = Model::new(model_cfg.clone(), seed)?;
    let step_rng = || rng::derive(seed, &[GRAD_CHECK]);
    let (_, grads) = stmae_step(&model, &graph, ssl, &mut step_rng())?;
    let loss_at =
        |m: &Model| -> Result<f64> { Ok(stmae_loss(m, &graph, ssl, &mut step_rng())?.l_total) };

    let mut by_group: BTreeMap<String, Vec<(crate::model::ParamId, usize)>> = BTreeMap::new();
    for id in model.params.ids() {
        let len = model.params.get(id).len();
        let group = by_group
            .entry(model.params.group(id).to_string())
            .or_default();
        group.extend((0..len).map(|k| (id, k)));
    }
    let mut pick = rng::derive(seed, &[GRAD_CHECK, 1]);
    let h = opts.step_size;
    let mut groups = Vec::new();
    for (name, mut entries) in by_group {
        entries.shuffle(&mut pick);
        entries.truncate(opts.samples_per_group);
        let mut max_rel: f64 = 0.0;
        let mut zeros = 0;
        for &(id, k) in &entries {
            let cols = model.params.get(id).ncols();
            let (r, c) = (k / cols, k % cols);
            let orig = model.params.get(id)[[r, c]];
            model.params.get_mut(id)[[r, c]] = orig + h;
            let up = loss_at(&model)?;
            model.params.get_mut(id)[[r, c]] = orig - h;
            let down = loss_at(&model)?;
            model.params.get_mut(id)[[r, c]] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id)[[r, c]];
            let scale = numeric.abs().max(analytic.abs());
            if scale < opts.zero_tol {
                zeros += 1;
                continue;
            }
            max_rel = max_rel.max((numeric - analytic).abs() / scale);
        }
        groups.push(GroupCheck {
            group: name,
            checked: entries.len(),
            max_rel_err: max_rel,
            zero_gradient: zeros == entries.len(),
        });
    }
    Ok(GradCheckReport {
        max_rel_err: groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max),
        checked: groups.iter().map(|g| g.checked).sum(),
        flagged: groups
            .iter()
            .filter(|g| g.zero_gradient)
            .map(|g| g.group.clone())
            .collect(),
        groups,
        step_size: h,
    })
}

/// Writes a pretty JSON document.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}
