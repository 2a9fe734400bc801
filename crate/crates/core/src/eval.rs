//! Metrics and the ablation harness.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::ingest::{split_folds, Dataset};
use crate::model::HeadKind;
use crate::train::{finetune, pretrain, Prediction};

/// Area under the ROC curve in its Mann-Whitney form: the probability that
/// a random positive scores above a random negative, ties counting half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::data("AUROC of NaN scores"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.iter().filter(|&&y| y == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(Error::data("AUROC labels must be 0 or 1"));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("AUROC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of the mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::data(format!(
            "{} predictions but {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::data("MAE of nothing"));
    }
    let total: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// Fraction of equal entries.
pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::data(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::data("accuracy of nothing"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Class 1 where `sigmoid(logit) >= 0.5`.
pub fn classify_logits(logits: &[f64]) -> Vec<u8> {
    logits.iter().map(|&z| u8::from(z >= 0.0)).collect()
}

/// Metrics of one fold (`fold = Some`) or an aggregate (`fold = None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub fold: Option<usize>,
    pub n: usize,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
}

impl MetricReport {
    /// `(name, value)` for every present metric.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        [
            ("auroc", self.auroc),
            ("accuracy", self.accuracy),
            ("mae", self.mae),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

pub fn task_name(task: HeadKind) -> &'static str {
    match task {
        HeadKind::Classify => "classify",
        HeadKind::Regress => "regress",
    }
}

/// Metrics of held-out predictions. AUROC is left out (with a warning)
/// when a fold holds a single class.
pub fn report_for(task: HeadKind, fold: usize, preds: &[Prediction]) -> Result<MetricReport> {
    if preds.is_empty() {
        return Err(Error::data(format!("fold {fold} has no predictions")));
    }
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let mut report = MetricReport {
        task: task_name(task).into(),
        fold: Some(fold),
        n: preds.len(),
        auroc: None,
        accuracy: None,
        mae: None,
    };
    match task {
        HeadKind::Classify => {
            let labels: Vec<u8> = preds.iter().map(|p| p.label as u8).collect();
            report.accuracy = Some(accuracy(&classify_logits(&scores), &labels)?);
            match auroc(&scores, &labels) {
                Ok(a) => report.auroc = Some(a),
                Err(e) => log::warn!("fold {fold}: AUROC undefined ({e})"),
            }
        }
        HeadKind::Regress => {
            let targets: Vec<f64> = preds.iter().map(|p| p.label).collect();
            report.mae = Some(mae(&scores, &targets)?);
        }
    }
    Ok(report)
}

/// Mean and sample standard deviation across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub task: String,
    pub n_folds: usize,
    pub mean: MetricReport,
    pub std: MetricReport,
}

pub fn summarize(folds: &[MetricReport]) -> Result<MetricSummary> {
    let first = folds
        .first()
        .ok_or_else(|| Error::data("no fold reports to summarize"))?;
    let stat = |get: fn(&MetricReport) -> Option<f64>| -> (Option<f64>, Option<f64>) {
        let vals: Vec<f64> = folds.iter().filter_map(get).collect();
        if vals.is_empty() {
            return (None, None);
        }
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let var = if vals.len() > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0)
        } else {
            0.0
        };
        (Some(mean), Some(var.sqrt()))
    };
    let (auroc_m, auroc_s) = stat(|r| r.auroc);
    let (acc_m, acc_s) = stat(|r| r.accuracy);
    let (mae_m, mae_s) = stat(|r| r.mae);
    let n = folds.iter().map(|r| r.n).sum();
    let make = |a, b, c| MetricReport {
        task: first.task.clone(),
        fold: None,
        n,
        auroc: a,
        accuracy: b,
        mae: c,
    };
    Ok(MetricSummary {
        task: first.task.clone(),
        n_folds: folds.len(),
        mean: make(auroc_m, acc_m, mae_m),
        std: make(auroc_s, acc_s, mae_s),
    })
}

#[derive(Serialize)]
struct MetricRow<'a> {
    fold: String,
    metric: &'a str,
    value: f64,
}

/// `(fold, metric, value)` rows, followed by `mean` and `std` rows.
pub fn write_metrics_csv(
    path: impl AsRef<Path>,
    folds: &[MetricReport],
    summary: &MetricSummary,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in folds {
        for (metric, value) in r.metrics() {
            w.serialize(MetricRow {
                fold: r.fold.map_or_else(|| "all".into(), |f| f.to_string()),
                metric,
                value,
            })?;
        }
    }
    for (tag, r) in [("mean", &summary.mean), ("std", &summary.std)] {
        for (metric, value) in r.metrics() {
            w.serialize(MetricRow {
                fold: tag.into(),
                metric,
                value,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The knob an ablation grid varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    MaskRatio,
    Criterion,
    SslFraction,
    LabelFraction,
    ReconTarget,
}

impl GridKind {
    pub const ALL: [GridKind; 5] = [
        GridKind::MaskRatio,
        GridKind::Criterion,
        GridKind::SslFraction,
        GridKind::LabelFraction,
        GridKind::ReconTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::MaskRatio => "mask_ratio",
            GridKind::Criterion => "criterion",
            GridKind::SslFraction => "ssl_fraction",
            GridKind::LabelFraction => "label_fraction",
            GridKind::ReconTarget => "recon_target",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|g| g.name() == name)
            .ok_or_else(|| Error::config(format!("unknown ablation grid {name:?}")))
    }

    /// Values swept when none are given. Categorical grids ignore values.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            GridKind::MaskRatio => vec![0.1, 0.3, 0.5, 0.7, 0.9],
            GridKind::SslFraction => vec![0.25, 0.5, 1.0],
            GridKind::LabelFraction => vec![0.1, 0.25, 0.5, 1.0],
            GridKind::Criterion | GridKind::ReconTarget => Vec::new(),
        }
    }

    /// Config keys the grid may change.
    pub fn keys(self) -> &'static [&'static str] {
        match self {
            GridKind::MaskRatio => &["ssl.mask.node_ratio", "ssl.mask.edge_ratio"],
            GridKind::Criterion => &["ssl.node_criterion", "ssl.edge_criterion"],
            GridKind::SslFraction => &["ssl_fraction"],
            GridKind::LabelFraction => &["finetune.label_fraction"],
            GridKind::ReconTarget => &["ssl.recon_target"],
        }
    }
}

/// One configuration of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub label: String,
    /// Position on the plot axis: the swept value, or the cell index for
    /// categorical grids.
    pub x: f64,
    pub config: RunConfig,
}

/// Expands a grid over `base`. Every cell differs from `base` only in
/// [`GridKind::keys`].
pub fn grid_cells(kind: GridKind, values: &[f64], base: &RunConfig) -> Result<Vec<AblationCell>> {
    let numeric = |keys: &[&str]| -> Result<Vec<AblationCell>> {
        if values.is_empty() {
            return Err(Error::config(format!("grid {} has no values", kind.name())));
        }
        values
            .iter()
            .map(|&v| {
                let raw = v.to_string();
                let config = base.with_overrides(keys.iter().map(|k| (*k, raw.as_str())))?;
                Ok(AblationCell {
                    label: raw,
                    x: v,
                    config,
                })
            })
            .collect()
    };
    let categorical = |settings: &[&[&str]]| -> Result<Vec<AblationCell>> {
        settings
            .iter()
            .enumerate()
            .map(|(i, vals)| {
                let config =
                    base.with_overrides(kind.keys().iter().copied().zip(vals.iter().copied()))?;
                Ok(AblationCell {
                    label: vals.join("/"),
                    x: i as f64,
                    config,
                })
            })
            .collect()
    };
    let cells = match kind {
        GridKind::MaskRatio | GridKind::SslFraction | GridKind::LabelFraction => {
            numeric(kind.keys())?
        }
        GridKind::Criterion => categorical(&[
            &["mse", "mse"],
            &["mse", "bce"],
            &["sce", "mse"],
            &["sce", "bce"],
        ])?,
        GridKind::ReconTarget => categorical(&[&["node"], &["edge"], &["both"]])?,
    };
    for cell in &cells {
        let changed = base.diff_keys(&cell.config);
        if let Some(k) = changed.iter().find(|k| !kind.keys().contains(&k.as_str())) {
            return Err(Error::config(format!(
                "cell {} of grid {} changes {k}, which is not its knob",
                cell.label,
                kind.name()
            )));
        }
    }
    Ok(cells)
}

/// One row of the ablation table. The column set is the same for every
/// grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub grid: String,
    pub cell: String,
    pub x: f64,
    /// Fold index, or `mean` / `std` / `all` (failed cell).
    pub fold: String,
    pub n: Option<usize>,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub status: String,
    /// Config keys that differ from the base config, `;`-separated.
    pub changed: String,
    pub seed: u64,
    pub error: String,
}

/// Plot-ready long-format row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub series: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub kind: GridKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Mean rows as long-format points, one series per metric.
    pub fn long_rows(&self) -> Vec<LongRow> {
        let mut out = Vec::new();
        for metric in ["auroc", "accuracy", "mae"] {
            for r in self.rows.iter().filter(|r| r.fold == "mean") {
                let v = match metric {
                    "auroc" => r.auroc,
                    "accuracy" => r.accuracy,
                    _ => r.mae,
                };
                if let Some(y) = v {
                    out.push(LongRow {
                        series: metric.into(),
                        label: r.cell.clone(),
                        x: r.x,
                        y,
                    });
                }
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        write_rows(dir.join("ablation.csv"), &self.rows)?;
        write_rows(dir.join("ablation_long.csv"), &self.long_rows())
    }
}

pub fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Runs pre-training and fine-tuning for every cell with the same seeds
/// and folds. A failing cell is recorded and the rest continue.
pub fn ablate(
    ds: &Dataset,
    kind: GridKind,
    values: &[f64],
    base: &RunConfig,
    task: HeadKind,
) -> Result<AblationTable> {
    let cells = grid_cells(kind, values, base)?;
    let folds = split_folds(&ds.ids_and_classes(), base.folds, base.finetune.seed)?;
    let mut rows = Vec::new();
    for cell in &cells {
        let changed = base.diff_keys(&cell.config).join(";");
        let row =
            |fold: String, r: Option<&MetricReport>, status: &str, error: String| AblationRow {
                grid: kind.name().into(),
                cell: cell.label.clone(),
                x: cell.x,
                fold,
                n: r.map(|r| r.n),
                auroc: r.and_then(|r| r.auroc),
                accuracy: r.and_then(|r| r.accuracy),
                mae: r.and_then(|r| r.mae),
                status: status.into(),
                changed: changed.clone(),
                seed: cell.config.pretrain.seed,
                error,
            };
        log::info!("ablation {} cell {}", kind.name(), cell.label);
        let outcome = pretrain(ds, &cell.config, None)
            .and_then(|p| finetune(ds, Some(&p.checkpoint), task, &folds, &cell.config));
        match outcome {
            Ok(o) => {
                for r in &o.folds {
                    rows.push(row(
                        r.fold.expect("fold").to_string(),
                        Some(r),
                        "ok",
                        String::new(),
                    ));
                }
                rows.push(row(
                    "mean".into(),
                    Some(&o.summary.mean),
                    "ok",
                    String::new(),
                ));
                rows.push(row("std".into(), Some(&o.summary.std), "ok", String::new()));
            }
            Err(e) => {
                log::error!("ablation cell {} failed: {e}", cell.label);
                rows.push(row("all".into(), None, "failed", e.to_string()));
            }
        }
    }
    Ok(AblationTable { kind, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_extremes() {
        let y = [0, 0, 1, 1];
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &y).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.3, 0.2, 0.1], &y).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 4], &y).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn mae_and_accuracy() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((mae(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(mae(&[1.0], &[]).is_err());
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        let acc = accuracy(&[1, 1, 0, 0], &[1, 0, 0, 0]).unwrap();
        let flipped = accuracy(&[0, 0, 1, 1], &[1, 0, 0, 0]).unwrap();
        assert_eq!(acc + flipped, 1.0);
        assert_eq!(classify_logits(&[-0.1, 0.0, 2.0]), vec![0, 1, 1]);
    }

    #[test]
    fn summary_mean_and_std() {
        let r = |f, a| MetricReport {
            task: "classify".into(),
            fold: Some(f),
            n: 2,
            auroc: Some(a),
            accuracy: Some(1.0),
            mae: None,
        };
        let s = summarize(&[r(0, 0.5), r(1, 0.7)]).unwrap();
        assert!((s.mean.auroc.unwrap() - 0.6).abs() < 1e-15);
        assert!((s.std.auroc.unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert_eq!(s.std.accuracy, Some(0.0));
        assert_eq!(s.mean.mae, None);
        assert_eq!(s.mean.n, 4);
    }

    #[test]
    fn criterion_grid_has_four_cells() {
        let base = RunConfig::default();
        let cells = grid_cells(GridKind::Criterion, &[], &base).unwrap();
        let labels: Vec<_> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["mse/mse", "mse/bce", "sce/mse", "sce/bce"]);
    }

    #[test]
    fn numeric_grid_changes_only_its_knob() {
        let base = RunConfig::default();
        for kind in [
            GridKind::MaskRatio,
            GridKind::SslFraction,
            GridKind::LabelFraction,
        ] {
            for cell in grid_cells(kind, &kind.default_values(), &base).unwrap() {
                for k in base.diff_keys(&cell.config) {
                    assert!(kind.keys().contains(&k.as_str()), "{k}");
                }
            }
        }
        assert!(grid_cells(GridKind::MaskRatio, &[], &base).is_err());
        assert!(grid_cells(GridKind::SslFraction, &[1.5], &base).is_err());
    }

    #[test]
    fn grid_names_round_trip() {
        for g in GridKind::ALL {
            assert_eq!(GridKind::parse(g.name()).unwrap(), g);
        }
        assert!(GridKind::parse("depth").is_err());
    }
}
