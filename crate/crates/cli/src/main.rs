//! `stmae` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or configuration error,
//! 3 runtime failure (non-finite loss, failed gradient check, ...).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use stmae::config::{GraphConfig, RunConfig};
use stmae::dynfc::{self, DynamicGraph};
use stmae::eval::{self, GridKind};
use stmae::ingest::{self, Dataset, SynthSpec};
use stmae::model::{HeadKind, MlpKind, ModelConfig};
use stmae::plot::{self, PlotKind};
use stmae::ssl::SslConfig;
use stmae::train::{self, Checkpoint, GradCheckConfig};
use stmae::Error;

#[derive(Parser, Debug)]
#[command(name = "stmae", version, about = "Dynamic FC graphs and masked autoencoder pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate a labeled synthetic cohort: one CSV per subject plus manifest.jsonl.
    Synth(SynthArgs),
    /// Build sliding-window graphs for every subject of a dataset.
    BuildGraphs(BuildArgs),
    /// Structural statistics of a directory of built graphs.
    Stats(StatsArgs),
    /// Self-supervised pre-training.
    Pretrain(PretrainArgs),
    /// K-fold fine-tuning from a checkpoint, or the supervised baseline without one.
    Finetune(FinetuneArgs),
    /// Pre-train and fine-tune once per cell of an ablation grid.
    Ablate(AblateArgs),
    /// Compare analytic gradients with central finite differences on a tiny model.
    GradCheck(GradCheckArgs),
    /// Render a long-format results CSV (series,label,x,y) as SVG.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    subjects: usize,
    #[arg(long, default_value_t = 64)]
    rois: usize,
    #[arg(long, default_value_t = 300)]
    timepoints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Difference in cross-community coupling between the two classes.
    #[arg(long, default_value_t = 0.6)]
    contrast: f64,
    #[arg(long, default_value_t = 4)]
    communities: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Shortest window the series must cover twice.
    #[arg(long, default_value_t = 50)]
    reference_window: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

/// Configuration shared by the training commands. Later sources win:
/// defaults, `--preset`, `--config`, then each `--set`.
#[derive(Args, Debug, Serialize)]
struct ConfigArgs {
    /// Graph preset: ukb-like or clinical-like.
    #[arg(long)]
    preset: Option<String>,
    /// Config file of `key = value` lines, or a run.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set pretrain.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed of both training stages.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
struct BuildArgs {
    /// Dataset directory holding manifest.jsonl, or the manifest itself.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    frac: Option<f64>,
    /// Output directory (default: <data>/graphs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct StatsArgs {
    /// Directory of `.stdg` graph files.
    #[arg(long)]
    graphs: PathBuf,
    /// Output directory (default: the graphs directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    /// Dataset directory holding manifest.jsonl, or the manifest itself.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Shortcut for the stage's `epochs` key.
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
enum Task {
    Classify,
    Regress,
}

impl From<Task> for HeadKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Classify => HeadKind::Classify,
            Task::Regress => HeadKind::Regress,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct FinetuneArgs {
    /// Dataset directory holding manifest.jsonl, or the manifest itself.
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained checkpoint; omit to train the supervised baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::Classify)]
    task: Task,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Shortcut for the stage's `epochs` key.
    #[arg(long)]
    epochs: Option<usize>,
    /// Fraction of training labels used per fold.
    #[arg(long)]
    label_fraction: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AblateArgs {
    /// Dataset directory holding manifest.jsonl, or the manifest itself.
    #[arg(long)]
    data: PathBuf,
    /// mask_ratio, criterion, ssl_fraction, label_fraction or recon_target.
    #[arg(long)]
    grid: String,
    /// Comma-separated grid values (default: the grid's standard values).
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Task::Classify)]
    task: Task,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 6)]
    rois: usize,
    #[arg(long, default_value_t = 4)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 5)]
    snapshots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 1e-6)]
    step: f64,
    /// Replace every MLP with the identity.
    #[arg(long)]
    identity: bool,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PlotArgs {
    /// Long-format CSV with columns series,label,x,y.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "line")]
    kind: String,
    #[arg(long, default_value = "")]
    title: String,
    /// Output directory; the figure is written to <out>/<name>.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "plot.svg")]
    name: String,
}

/// Error with its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } | Error::Runtime(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> std::result::Result<(), String> {
    let Ok(raw) = std::env::var("STMAE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("STMAE_THREADS must be a positive integer, got {raw:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cmd: &Command) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(cmd, a),
        Command::BuildGraphs(a) => build_graphs(cmd, a),
        Command::Stats(a) => stats(cmd, a),
        Command::Pretrain(a) => pretrain(cmd, a),
        Command::Finetune(a) => finetune(cmd, a),
        Command::Ablate(a) => ablate(cmd, a),
        Command::GradCheck(a) => grad_check(cmd, a),
        Command::Plot(a) => plot(cmd, a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        msg: format!("cannot create {}: {e}", dir.display()),
    })
}

/// Writes the provenance record. `config` is the effective configuration;
/// passing the file back through `--config` reproduces the run.
fn write_run_json(out: &Path, cmd: &Command, seed: Option<u64>, config: Value) -> CliResult<()> {
    let record = json!({
        "command": cmd,
        "argv": std::env::args().collect::<Vec<_>>(),
        "seed": seed,
        "config": config,
        "versions": {
            "stmae": env!("CARGO_PKG_VERSION"),
            "checkpoint_format": train::CHECKPOINT_VERSION,
        },
        "threads": rayon::current_num_threads(),
    });
    train::write_json(out.join("run.json"), &record)?;
    Ok(())
}

fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.to_path_buf()
    }
}

fn load_dataset(data: &Path) -> CliResult<Dataset> {
    let ds = Dataset::load(manifest_path(data))?;
    if ds.is_empty() {
        return Err(Error::data(format!("{}: manifest lists no subjects", data.display())).into());
    }
    Ok(ds)
}

/// Effective run configuration from defaults, preset, file and overrides.
fn resolve_config(a: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(name) = &a.preset {
        cfg.graph = GraphConfig::preset(name)?;
    }
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure {
            code: 2,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        cfg = match serde_json::from_str::<Value>(&text) {
            Ok(v) => {
                let inner = v.get("config").cloned().unwrap_or(v);
                serde_json::from_value(inner)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            Err(_) => cfg.parse_over(&text)?,
        };
    }
    let pairs = a
        .set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got {kv:?}")))
        })
        .collect::<stmae::Result<Vec<_>>>()?;
    cfg = cfg.with_overrides(pairs)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_value(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn synth(cmd: &Command, a: &SynthArgs) -> CliResult<()> {
    let spec = SynthSpec {
        communities: a.communities,
        coupling_contrast: a.contrast,
        noise: a.noise,
        reference_window: a.reference_window,
        ..SynthSpec::default()
    };
    let (manifest, files) = ingest::synth_dataset(a.subjects, a.rois, a.timepoints, a.seed, &spec, &a.out)?;
    write_run_json(
        &a.out,
        cmd,
        Some(a.seed),
        json!({ "subjects": a.subjects, "rois": a.rois, "timepoints": a.timepoints, "spec": spec }),
    )?;
    println!(
        "wrote {} subjects ({} CSV files) and manifest.jsonl to {}",
        manifest.entries.len(),
        files.len(),
        a.out.display()
    );
    Ok(())
}

fn build_graphs(cmd: &Command, a: &BuildArgs) -> CliResult<()> {
    let mut graph = match &a.preset {
        Some(name) => GraphConfig::preset(name)?,
        None => GraphConfig::default(),
    };
    if let Some(w) = a.window {
        graph.window = w;
    }
    if let Some(s) = a.stride {
        graph.stride = s;
    }
    if let Some(f) = a.frac {
        graph.frac = f;
    }
    graph.validate()?;
    let ds = load_dataset(&a.data)?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => {
            let root = if a.data.is_dir() {
                a.data.clone()
            } else {
                a.data.parent().map(Path::to_path_buf).unwrap_or_default()
            };
            root.join("graphs")
        }
    };
    create_dir(&out)?;
    let graphs = train::full_graphs(&ds, &graph)?;
    let mut index = Vec::with_capacity(graphs.len());
    for g in &graphs {
        let name = format!("{}.stdg", g.subject_id);
        dynfc::write_graph_cache(g, out.join(&name))?;
        index.push(json!({ "subject_id": g.subject_id, "path": name, "snapshots": g.len() }));
    }
    train::write_json(out.join("graphs.json"), &index)?;
    write_run_json(&out, cmd, None, json!({ "graph": graph }))?;
    let mut counts: Vec<usize> = graphs.iter().map(DynamicGraph::len).collect();
    counts.dedup();
    println!(
        "built {} graphs in {}: T = {} snapshots per subject, N = {}",
        graphs.len(),
        out.display(),
        counts.iter().map(ToString::to_string).collect::<Vec<_>>().join("/"),
        graphs[0].n_rois
    );
    Ok(())
}

fn read_graph_dir(dir: &Path) -> CliResult<Vec<DynamicGraph>> {
    let entries = fs::read_dir(dir).map_err(|e| Failure {
        code: 2,
        msg: format!("cannot read {}: {e}", dir.display()),
    })?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "stdg"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!("no .stdg graph files in {}", dir.display())).into());
    }
    Ok(paths
        .iter()
        .map(dynfc::read_graph_cache)
        .collect::<stmae::Result<Vec<_>>>()?)
}

fn stats(cmd: &Command, a: &StatsArgs) -> CliResult<()> {
    let graphs = read_graph_dir(&a.graphs)?;
    let s = dynfc::graph_stats(&graphs)?;
    let out = a.out.clone().unwrap_or_else(|| a.graphs.clone());
    create_dir(&out)?;
    train::write_json(out.join("stats.json"), &s)?;
    write_run_json(&out, cmd, None, json!({ "graphs": a.graphs }))?;
    println!("graphs       {}", graphs.len());
    println!("snapshots    {}", s.n_graphs);
    println!("nodes/graph  {}", s.n_nodes_avg);
    println!("edges/graph  {}", s.n_edges_avg);
    println!("d_max        {}", s.d_max);
    println!("d_avg        {:.4}", s.d_avg);
    println!("clustering   {:.4}", s.clustering);
    Ok(())
}

fn pretrain(cmd: &Command, a: &PretrainArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    write_run_json(&a.out, cmd, Some(cfg.pretrain.seed), config_value(&cfg))?;
    cfg.save(a.out.join("config.txt"))?;
    let outcome = train::pretrain(&ds, &cfg, Some(&a.out))?;
    let first = outcome.epoch_means.first().copied().unwrap_or(f64::NAN);
    let last = outcome.epoch_means.last().copied().unwrap_or(f64::NAN);
    println!(
        "pre-trained on {} subjects for {} epochs: l_total {first:.4} -> {last:.4}; checkpoint {}",
        outcome.subjects.len(),
        cfg.pretrain.epochs,
        a.out.join("checkpoint.bin").display()
    );
    Ok(())
}

fn finetune(cmd: &Command, a: &FinetuneArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&a.cfg)?;
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(f) = a.label_fraction {
        cfg.finetune.label_fraction = f;
    }
    cfg.validate()?;
    let ds = load_dataset(&a.data)?;
    let ckpt = a.checkpoint.as_ref().map(Checkpoint::load).transpose()?;
    create_dir(&a.out)?;
    write_run_json(&a.out, cmd, Some(cfg.finetune.seed), config_value(&cfg))?;
    let folds = ingest::split_folds(&ds.ids_and_classes(), cfg.folds, cfg.finetune.seed)?;
    let o = train::finetune(&ds, ckpt.as_ref(), a.task.into(), &folds, &cfg)?;
    eval::write_metrics_csv(a.out.join("metrics.csv"), &o.folds, &o.summary)?;
    train::write_json(a.out.join("summary.json"), &o.summary)?;
    eval::write_rows(a.out.join("predictions.csv"), &o.predictions)?;
    let m = &o.summary.mean;
    let s = &o.summary.std;
    let show = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
    println!(
        "{} ({}), {} folds: auroc {} ± {}, accuracy {} ± {}, mae {} ± {}",
        eval::task_name(o.task),
        if ckpt.is_some() { "pre-trained" } else { "baseline" },
        o.summary.n_folds,
        show(m.auroc),
        show(s.auroc),
        show(m.accuracy),
        show(s.accuracy),
        show(m.mae),
        show(s.mae)
    );
    Ok(())
}

fn ablate(cmd: &Command, a: &AblateArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.cfg)?;
    let kind = GridKind::parse(&a.grid)?;
    let values = if a.values.is_empty() {
        kind.default_values()
    } else {
        a.values.clone()
    };
    let ds = load_dataset(&a.data)?;
    create_dir(&a.out)?;
    write_run_json(&a.out, cmd, Some(cfg.pretrain.seed), config_value(&cfg))?;
    let table = eval::ablate(&ds, kind, &values, &cfg, a.task.into())?;
    table.write(&a.out)?;
    let failed = table.rows.iter().filter(|r| r.status != "ok").count();
    println!(
        "ablation {}: {} rows, {failed} failed cells; tables in {}",
        kind.name(),
        table.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn grad_check(cmd: &Command, a: &GradCheckArgs) -> CliResult<()> {
    let mut model = ModelConfig::new(a.rois, a.hidden);
    model.n_layers = a.layers;
    if a.identity {
        model.gin_mlp = MlpKind::Identity;
        model.decoder = MlpKind::Identity;
    }
    model.validate()?;
    let opts = GradCheckConfig {
        snapshots: a.snapshots,
        samples_per_group: a.samples,
        step_size: a.step,
        ..GradCheckConfig::default()
    };
    let ssl = SslConfig::default();
    create_dir(&a.out)?;
    write_run_json(&a.out, cmd, Some(a.seed), json!({ "model": model, "ssl": ssl, "grad_check": opts }))?;
    let report = train::grad_check(&model, &ssl, a.seed, &opts)?;
    train::write_json(a.out.join("grad_check.json"), &report)?;
    for g in &report.groups {
        println!("{:<24} {:>4} entries  max rel err {:.3e}", g.group, g.checked, g.max_rel_err);
    }
    if !report.flagged.is_empty() {
        println!("zero gradient (flagged): {}", report.flagged.join(", "));
    }
    println!("max relative error {:.3e} over {} entries", report.max_rel_err, report.checked);
    if report.max_rel_err >= a.tol {
        return Err(Error::Runtime(format!(
            "gradient check failed: {:.3e} >= {:.1e}",
            report.max_rel_err, a.tol
        ))
        .into());
    }
    Ok(())
}

fn plot(cmd: &Command, a: &PlotArgs) -> CliResult<()> {
    let kind = PlotKind::parse(&a.kind)?;
    let file = fs::File::open(&a.input).map_err(|e| Failure {
        code: 2,
        msg: format!("cannot open {}: {e}", a.input.display()),
    })?;
    let points = plot::read_points(file)?;
    let svg = plot::render_svg(&points, kind, &a.title)?;
    create_dir(&a.out)?;
    let path = a.out.join(&a.name);
    fs::write(&path, svg).map_err(|e| Failure {
        code: 2,
        msg: format!("cannot write {}: {e}", path.display()),
    })?;
    write_run_json(&a.out, cmd, None, json!({ "input": a.input, "kind": a.kind }))?;
    println!("wrote {} points to {}", points.len(), path.display());
    Ok(())
}
