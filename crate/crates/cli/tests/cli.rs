//! End-to-end runs of the `stmae` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn stmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmae"))
        .args(args)
        .env("STMAE_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stmae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    stmae(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn run_json(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn synth_build_and_stats_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["synth", "--subjects", "20", "--rois", "32", "--timepoints", "300", "--seed", "0", "--out", p(&data)]);
    let csvs = fs::read_dir(&data)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "csv"))
        .count();
    assert_eq!(csvs, 20);
    assert_eq!(fs::read_to_string(data.join("manifest.jsonl")).unwrap().lines().count(), 20);
    assert_eq!(run_json(&data)["seed"], 0);

    let graphs = tmp.path().join("g");
    let out = ok(&["build-graphs", "--data", p(&data), "--window", "50", "--stride", "16", "--frac", "0.3", "--out", p(&graphs)]);
    assert!(out.contains("T = 16 snapshots"), "{out}");

    let stats_dir = tmp.path().join("s");
    let out = ok(&["stats", "--graphs", p(&graphs), "--out", p(&stats_dir)]);
    assert!(out.contains("edges/graph  138\n"), "{out}");
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(stats_dir.join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_edges_avg"], 138.0);
}

#[test]
fn training_commands_write_replayable_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    ok(&["synth", "--subjects", "6", "--rois", "8", "--timepoints", "40", "--reference-window", "16", "--out", p(&data)]);
    let small = [
        "--preset", "clinical-like", "--set", "model.hidden=8", "--set", "model.n_layers=2",
        "--set", "folds=2", "--set", "pretrain.batch_size=4", "--set", "finetune.batch_size=4",
    ];

    let pre = tmp.path().join("pre");
    let mut args = vec!["pretrain", "--data", p(&data), "--epochs", "2", "--seed", "3", "--out", p(&pre)];
    args.extend(small);
    ok(&args);
    assert!(pre.join("checkpoint.bin").is_file());
    assert!(pre.join("loss_log.csv").is_file());
    let run = run_json(&pre);
    assert_eq!(run["seed"], 3);
    assert_eq!(run["config"]["model"]["hidden"], 8);
    assert_eq!(run["config"]["pretrain"]["epochs"], 2);
    assert!(run["argv"].as_array().unwrap().len() > 3);
    assert!(run["versions"]["stmae"].is_string());

    // replaying from run.json alone reproduces the loss log bit for bit
    let again = tmp.path().join("again");
    ok(&["pretrain", "--data", p(&data), "--config", p(&pre.join("run.json")), "--out", p(&again)]);
    assert_eq!(
        fs::read(pre.join("loss_log.csv")).unwrap(),
        fs::read(again.join("loss_log.csv")).unwrap()
    );

    let ft = tmp.path().join("ft");
    let ckpt = pre.join("checkpoint.bin");
    let mut args = vec!["finetune", "--data", p(&data), "--checkpoint", p(&ckpt), "--epochs", "2", "--out", p(&ft)];
    args.extend(small);
    let out = ok(&args);
    assert!(out.contains("pre-trained"), "{out}");
    let metrics = fs::read_to_string(ft.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "fold,metric,value");
    assert!(metrics.lines().any(|l| l.starts_with("mean,auroc,")));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(ft.join("summary.json")).unwrap()).unwrap();
    assert!(summary["std"]["auroc"].is_number());

    let ab = tmp.path().join("ab");
    let mut args = vec!["ablate", "--data", p(&data), "--grid", "criterion", "--out", p(&ab)];
    args.extend(small);
    args.extend(["--set", "pretrain.epochs=1", "--set", "finetune.epochs=1"]);
    ok(&args);
    let table = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    let cells: std::collections::BTreeSet<&str> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(cells.len(), 4);

    let plot_dir = tmp.path().join("plot");
    ok(&["plot", "--input", p(&ab.join("ablation_long.csv")), "--kind", "bar", "--out", p(&plot_dir)]);
    let svg = fs::read_to_string(plot_dir.join("plot.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn grad_check_passes_on_the_tiny_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--out", p(tmp.path())]);
    assert!(out.contains("max relative error"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("grad_check.json")).unwrap()).unwrap();
    assert!(report["max_rel_err"].as_f64().unwrap() < 1e-4);
}

#[test]
fn plot_is_deterministic_and_rejects_empty_input() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("r.csv");
    fs::write(&csv, "series,label,x,y\na,,0,1\na,,1,2\nb,,0,3\n").unwrap();
    let (d1, d2) = (tmp.path().join("1"), tmp.path().join("2"));
    ok(&["plot", "--input", p(&csv), "--out", p(&d1)]);
    ok(&["plot", "--input", p(&csv), "--out", p(&d2)]);
    let svg = fs::read(d1.join("plot.svg")).unwrap();
    assert_eq!(svg, fs::read(d2.join("plot.svg")).unwrap());
    assert_eq!(String::from_utf8(svg).unwrap().matches("class=\"legend-entry\"").count(), 2);

    let empty = tmp.path().join("e.csv");
    fs::write(&empty, "series,label,x,y\n").unwrap();
    assert_eq!(code(&["plot", "--input", p(&empty), "--out", p(&tmp.path().join("3"))]), 2);
}

#[test]
fn exit_codes_follow_the_documented_mapping() {
    let tmp = tempfile::tempdir().unwrap();
    let out = p(tmp.path());
    assert_eq!(code(&["synth", "--no-such-flag"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["synth"]), 1);
    assert_eq!(code(&["synth", "--rois", "2", "--out", out]), 2);
    assert_eq!(code(&["pretrain", "--data", out, "--out", out]), 2);
    let data = tmp.path().join("d");
    ok(&["synth", "--subjects", "4", "--rois", "8", "--timepoints", "40", "--reference-window", "16", "--out", p(&data)]);
    assert_eq!(code(&["pretrain", "--data", p(&data), "--set", "pretrain.nope=1", "--out", out]), 2);
    assert_eq!(
        code(&[
            "pretrain", "--data", p(&data), "--preset", "clinical-like", "--epochs", "3",
            "--set", "pretrain.lr=1e200", "--set", "pretrain.schedule=constant", "--out", out,
        ]),
        3
    );
    assert!(tmp.path().join("nan_dump.json").is_file());
    assert_eq!(code(&["grad-check", "--tol", "1e-30", "--out", out]), 3);
}

#[test]
fn every_command_has_help_listing_its_flags() {
    let commands = [
        ("synth", &["--subjects", "--rois", "--timepoints", "--seed", "--out"][..]),
        ("build-graphs", &["--data", "--window", "--stride", "--frac", "--preset", "--out"]),
        ("stats", &["--graphs", "--out"]),
        ("pretrain", &["--data", "--config", "--set", "--preset", "--seed", "--epochs", "--out"]),
        ("finetune", &["--data", "--checkpoint", "--task", "--label-fraction", "--out"]),
        ("ablate", &["--data", "--grid", "--values", "--task", "--out"]),
        ("grad-check", &["--rois", "--hidden", "--layers", "--identity", "--tol", "--out"]),
        ("plot", &["--input", "--kind", "--title", "--out"]),
    ];
    for (cmd, flags) in commands {
        let help = ok(&[cmd, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
