use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use stdim_cli::commands;
use stdim_cli::config::RunConfig;
use stdim_cli::manifest::RunManifest;
use stdim_cli::table::{compare, Metric};
use stdim_core::checkpoint::Checkpoint;
use stdim_core::encoder::{Encoder, EncoderConfig};
use stdim_core::envstream::TrajectoryDataset;
use stdim_core::objectives::{LogRecord, Phase};
use stdim_core::probe::ProbeReport;

fn stdim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stdim"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("STDIM_OUT")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small data and probe budgets so each command takes a second or two.
const TOY: &[&str] = &[
    "--set",
    "workers=2",
    "--set",
    "frames_per_worker=200",
    "--set",
    "split_train=200",
    "--set",
    "split_val=50",
    "--set",
    "split_test=100",
    "--set",
    "probe_steps=300",
    "--set",
    "batch_size=16",
];

fn with_toy<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TOY);
    v
}

fn gen(out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = with_toy(&["gen-data"]);
    args.extend_from_slice(extra);
    let o = stdim(out, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("dataset.bin")
}

#[test]
fn gen_data_is_valid_and_seed_determined() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    let pa = gen(&a, &["--seed", "3"]);
    let pb = gen(&b, &["--seed", "3"]);
    let pc = gen(&c, &["--seed", "4"]);
    let ds = TrajectoryDataset::load(&pa).unwrap();
    assert_eq!(ds.num_frames(), 400);
    let bytes = std::fs::read(&pa).unwrap();
    assert_eq!(bytes, std::fs::read(&pb).unwrap());
    assert_ne!(bytes, std::fs::read(&pc).unwrap());
    let m = RunManifest::load(&a.join("gen-data.manifest.json")).unwrap();
    assert_eq!(m.dataset_hash.as_deref(), Some(ds.content_hash().as_str()));
    assert!(m.config.contains("data_seed = 3\n"));
}

#[test]
fn policy_and_epsilon_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), &["--policy", "scripted", "--epsilon", "0.2"]);
    let m = RunManifest::load(&dir.path().join("gen-data.manifest.json")).unwrap();
    assert!(m.config.contains("policy = scripted\n"), "{}", m.config);
    assert!(m.config.contains("epsilon = 0.2\n"));
    let cfg = RunConfig::from_kv(&m.config).unwrap();
    let ds = TrajectoryDataset::load(dir.path().join("dataset.bin")).unwrap();
    assert_eq!(ds.provenance.policy, "scripted");
    assert_eq!(cfg.epsilon, 0.2);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = stdim(dir.path(), &["gen-data", "--set", "stepz=3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stepz"));
    let o = stdim(dir.path(), &["train", "--data", "missing.bin", "--method", "nope"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown method `nope`"), "{}", stderr(&o));
    let o = stdim(dir.path(), &["train", "--data", "missing.bin"]);
    assert_eq!(code(&o), 1);
    let o = stdim(dir.path(), &["report"]);
    assert_eq!(code(&o), 1);
    let o = stdim(dir.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "steps = ten\n").unwrap();
    let o = stdim(dir.path(), &["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a dataset").unwrap();
    let o = stdim(dir.path(), &["train", "--data", junk.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "frames_per_worker = 150\nworkers = 2\ndata_seed = 8\n").unwrap();
    let o = stdim(
        dir.path(),
        &["gen-data", "--config", cfg.to_str().unwrap(), "--set", "workers=3", "--seed", "9"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = RunManifest::load(&dir.path().join("gen-data.manifest.json")).unwrap();
    let c = RunConfig::from_kv(&m.config).unwrap();
    assert_eq!((c.frames_per_worker, c.workers, c.data_seed), (150, 3, 9));
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("from-env");
    let mut args = with_toy(&["gen-data"]);
    args.extend(["--set", "frames_per_worker=50"]);
    let o = Command::new(env!("CARGO_BIN_EXE_stdim"))
        .args(&args)
        .env("STDIM_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(root.join("dataset.bin").exists());
}

#[test]
fn random_cnn_checkpoint_is_the_seeded_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let t = Instant::now();
    let o = stdim(
        dir.path(),
        &with_toy(&["train", "--data", data.to_str().unwrap(), "--method", "random-cnn", "--seed", "5"]),
    );
    let secs = t.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(secs < 1.0, "{secs}s");
    let ckpt = Checkpoint::read_from(&mut std::fs::read(dir.path().join("random-cnn-s5.ckpt")).unwrap().as_slice())
        .unwrap();
    let fresh = Encoder::<f32>::new(EncoderConfig {
        seed: 5,
        ..EncoderConfig::default()
    })
    .unwrap();
    assert_eq!(ckpt.params, Checkpoint::from_model("", &fresh).params);
    assert_eq!(commands::checkpoint_method(&ckpt).unwrap(), "random-cnn");
}

fn train_records(log: &Path) -> Vec<f64> {
    std::fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<LogRecord>(l).unwrap())
        .filter(|r| r.phase == Phase::Train)
        .map(|r| r.loss.total)
        .collect()
}

#[test]
fn stdim_training_lowers_the_smoothed_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let o = stdim(
        dir.path(),
        &with_toy(&[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--method",
            "stdim",
            "--steps",
            "60",
            "--set",
            "log_every=1",
            "--set",
            "eval_every=20",
        ]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let losses = train_records(&dir.path().join("stdim-s0.log.jsonl"));
    assert_eq!(losses.len(), 60);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&losses[50..]) < mean(&losses[..10]), "{losses:?}");
    let m = RunManifest::load(&dir.path().join("stdim-s0.train.manifest.json")).unwrap();
    assert_eq!(m.checkpoints.len(), 1);
    assert!(m.timings.contains_key("train"));
}

fn probe_toy(out: &Path, data: &Path, method: &str) -> PathBuf {
    let o = stdim(out, &with_toy(&["train", "--data", data.to_str().unwrap(), "--method", method, "--steps", "5"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join(format!("{method}-s0.ckpt"));
    let o = stdim(
        out,
        &with_toy(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join(format!("{method}-s0.report.json"))
}

#[test]
fn probe_reports_validate_and_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let ckpt_bytes = |m: &str| std::fs::read(dir.path().join(format!("{m}-s0.ckpt"))).unwrap();
    let report = probe_toy(dir.path(), &data, "random-cnn");
    let first = std::fs::read(&report).unwrap();
    let r = ProbeReport::from_json(std::str::from_utf8(&first).unwrap()).unwrap();
    assert_eq!(r.method, "random-cnn");
    assert_eq!(r.maj_clf.variables.len(), r.probe.variables.len());
    assert!(r.metadata.pruned.contains(&"lives".to_string()));
    let csv = std::fs::read_to_string(dir.path().join("random-cnn-s0.report.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("maj-clf,overall")));
    let before = ckpt_bytes("random-cnn");

    let again = dir.path().join("again");
    let ckpt = dir.path().join("random-cnn-s0.ckpt");
    let o = stdim(
        &again,
        &with_toy(&["probe", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(again.join("random-cnn-s0.report.json")).unwrap(), first);
    assert_eq!(
        std::fs::read(again.join("random-cnn-s0.report.csv")).unwrap(),
        std::fs::read(dir.path().join("random-cnn-s0.report.csv")).unwrap()
    );
    assert_eq!(ckpt_bytes("random-cnn"), before);
    let m = RunManifest::load(&dir.path().join("random-cnn-s0.probe.manifest.json")).unwrap();
    assert_eq!(m.reports.len(), 3);
}

#[test]
fn report_command_compares_methods() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), &[]);
    let a = probe_toy(dir.path(), &data, "random-cnn");
    let b = probe_toy(dir.path(), &data, "stdim");
    let tables = dir.path().join("tables");
    let o = stdim(&tables, &["report", a.to_str().unwrap(), b.to_str().unwrap(), "--per-category"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("random-cnn"));
    assert!(text.lines().next().unwrap().contains("stdim"));
    let csv = std::fs::read_to_string(tables.join("report.csv")).unwrap();
    assert!(csv.starts_with("row,maj-clf,random-cnn,stdim,best\n"), "{csv}");
    assert_eq!(std::fs::read_to_string(tables.join("report.txt")).unwrap(), text);

    let reports: Vec<ProbeReport> = [&a, &b].iter().map(|p| commands::load_report(p).unwrap()).collect();
    let t = compare(&reports, false, Metric::F1).unwrap();
    assert_eq!(t.columns, vec!["maj-clf", "random-cnn", "stdim"]);
    assert_eq!(t.rows.last().unwrap(), "overall");
    for (r, row) in t.values.iter().enumerate() {
        let max = row[1].unwrap().max(row[2].unwrap());
        for c in 1..3 {
            assert_eq!(t.best[r][c], row[c].unwrap() >= max - 0.01 - 1e-12);
        }
        assert!(!t.best[r][0]);
    }
}
