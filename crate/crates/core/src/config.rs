//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths into [`RunConfig`], e.g. `pretrain.lr` or
//! `ssl.mask.node_ratio`. Blank lines and lines starting with `#` are ignored.
//! Unknown keys and badly typed values are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};
use crate::ssl::SslConfig;
use crate::train::{Schedule, TrainConfig};

/// Sliding-window graph construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub window: usize,
    pub stride: usize,
    /// Fraction of the full correlation matrix kept by top-k thresholding.
    pub frac: f64,
}

impl GraphConfig {
    pub fn ukb_like() -> Self {
        Self {
            window: 50,
            stride: 16,
            frac: 0.3,
        }
    }

    pub fn clinical_like() -> Self {
        Self {
            window: 16,
            stride: 3,
            frac: 0.3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "ukb-like" => Ok(Self::ukb_like()),
            "clinical-like" => Ok(Self::clinical_like()),
            other => Err(Error::config(format!(
                "unknown preset {other:?}; expected ukb-like or clinical-like"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.stride == 0 {
            return Err(Error::config(
                "window must be at least 2 and stride at least 1",
            ));
        }
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return Err(Error::config("threshold fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self::ukb_like()
    }
}

/// Everything a pre-training or fine-tuning run needs besides the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub graph: GraphConfig,
    /// `n_rois = 0` means "take it from the data".
    pub model: ModelConfig,
    pub ssl: SslConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub folds: usize,
    /// Fraction of the cohort used for pre-training.
    pub ssl_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut model = ModelConfig::new(0, 32);
        model.head = HeadKind::Classify;
        Self {
            graph: GraphConfig::default(),
            model,
            ssl: SslConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig {
                schedule: Schedule::OneCycle,
                epochs: 50,
                ..TrainConfig::pretrain_default()
            },
            folds: 5,
            ssl_fraction: 1.0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.ssl.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.folds < 2 {
            return Err(Error::config("folds must be at least 2"));
        }
        if !(self.ssl_fraction > 0.0 && self.ssl_fraction <= 1.0) {
            return Err(Error::config("ssl_fraction must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Sets the seed of both training stages.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
        self
    }

    /// Model configuration with the ROI count filled in.
    pub fn model_for(&self, n_rois: usize) -> Result<ModelConfig> {
        if self.model.n_rois != 0 && self.model.n_rois != n_rois {
            return Err(Error::config(format!(
                "config fixes model.n_rois = {} but the data has {n_rois} ROIs",
                self.model.n_rois
            )));
        }
        let mut cfg = self.model.clone();
        cfg.n_rois = n_rois;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat `key -> value` view, keys sorted.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = BTreeMap::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` overrides on top of `self`.
    pub fn with_overrides<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut value = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in pairs {
            set_path(&mut value, key, raw)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| Error::config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        Self::default().parse_over(text)
    }

    /// Parses config text on top of `self`.
    pub fn parse_over(&self, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    i + 1
                ))
            })?;
            pairs.push((k.trim(), v.trim()));
        }
        self.with_overrides(pairs)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Keys whose values differ between two configs.
    pub fn diff_keys(&self, other: &RunConfig) -> Vec<String> {
        let a = self.to_kv();
        let b = other.to_kv();
        a.iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

fn set_path(root: &mut Value, key: &str, raw: &str) -> Result<()> {
    let unknown = || Error::config(format!("unknown config key {key:?}"));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(*part))
            .ok_or_else(unknown)?;
    }
    let map: &mut Map<String, Value> = node.as_object_mut().ok_or_else(unknown)?;
    let slot = map.get_mut(parts[parts.len() - 1]).ok_or_else(unknown)?;
    let bad = |what: &str| Error::config(format!("{key}: expected {what}, got {raw:?}"));
    *slot = match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad("true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
            serde_json::Number::from_f64(v)
                .map(Value::Number)
                .ok_or_else(|| bad("a finite number"))?
        }
        Value::Number(_) => {
            if let Ok(v) = raw.parse::<u64>() {
                Value::from(v)
            } else {
                let v: f64 = raw.parse().map_err(|_| bad("a number"))?;
                serde_json::Number::from_f64(v)
                    .map(Value::Number)
                    .ok_or_else(|| bad("a finite number"))?
            }
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Object(_) | Value::Array(_) | Value::Null => return Err(unknown()),
    };
    Ok(())
}
