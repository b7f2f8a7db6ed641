//! The pipeline stages behind each subcommand. Every stage reads its inputs,
//! writes its outputs under one directory and leaves a manifest beside them.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use stdim_core::checkpoint::Checkpoint;
use stdim_core::encoder::Encoder;
use stdim_core::envstream::{collect, TrajectoryDataset};
use stdim_core::objectives::{train_encoder, LabelSplit, MethodId, TrainData};
use stdim_core::params::Parameterized;
use stdim_core::probe::{
    encode_splits, make_splits, probe_variables, prune_low_entropy, ProbeReport, ProbeSplit, ReportMetadata,
};

use crate::config::RunConfig;
use crate::manifest::{write_atomic, RunManifest};
use crate::table::{compare, report_text, Metric, Table};
use crate::UsageError;

pub const DATASET_FILE: &str = "dataset.bin";

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn load_dataset(path: &Path) -> anyhow::Result<TrajectoryDataset> {
    TrajectoryDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// Collects a dataset with the configured policy and writes `dataset.bin`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let t = Instant::now();
    let ds = collect(&cfg.collect_config())?;
    let path = out.join(DATASET_FILE);
    write_atomic(&path, &ds.to_bytes())?;
    let mut m = RunManifest::new("gen-data", cfg.to_kv());
    m.dataset_hash = Some(ds.content_hash());
    m.outputs.push(display(&path));
    m.timings.insert("collect".into(), t.elapsed().as_secs_f64());
    m.write(&out.join("gen-data.manifest.json"))?;
    Ok(path)
}

/// Probe split and retained variables; the supervised method trains on the
/// same split it is later probed on.
fn split_and_retained(cfg: &RunConfig, ds: &TrajectoryDataset) -> anyhow::Result<(ProbeSplit, Vec<usize>)> {
    let split = make_splits(ds, cfg.split_sizes(), cfg.split_seed)?;
    let retained = prune_low_entropy(ds, &split.train, cfg.entropy_threshold)?;
    if retained.is_empty() {
        return Err(anyhow!("no variable reaches entropy {}", cfg.entropy_threshold));
    }
    Ok((split, retained))
}

pub fn run_name(cfg: &RunConfig) -> String {
    format!("{}-s{}", cfg.method.id(), cfg.seed)
}

/// Checkpoint metadata: the method id followed by the encoder geometry.
fn checkpoint_metadata(method: MethodId, enc: &Encoder<f32>) -> String {
    format!("method = {}\n{}", method.id(), enc.config().to_kv())
}

pub fn checkpoint_method(ckpt: &Checkpoint) -> anyhow::Result<String> {
    ckpt.metadata
        .lines()
        .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == "method").map(|(_, v)| v.trim().to_string()))
        .ok_or_else(|| anyhow!("checkpoint metadata has no method"))
}

/// Trains the configured method on `dataset` and writes
/// `<method>-s<seed>.ckpt` with its JSON-lines training log.
pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path) -> anyhow::Result<PathBuf> {
    let t = Instant::now();
    let ds = load_dataset(dataset)?;
    let labels = if cfg.method.uses_labels() {
        let (split, retained) = split_and_retained(cfg, &ds)?;
        Some(LabelSplit {
            train: split.train,
            val: split.val,
            variables: retained,
        })
    } else {
        None
    };
    let foreign = if cfg.method == MethodId::StaticDim {
        Some(collect(&cfg.foreign_config())?)
    } else {
        None
    };
    let prep = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let trained = train_encoder(
        &cfg.train_config(),
        TrainData {
            dataset: &ds,
            foreign: foreign.as_ref(),
            labels: labels.as_ref(),
        },
    )?;
    let train_secs = t.elapsed().as_secs_f64();

    let name = run_name(cfg);
    let enc = &trained.model.encoder;
    let ckpt_path = out.join(format!("{name}.ckpt"));
    write_atomic(&ckpt_path, &Checkpoint::from_model(checkpoint_metadata(cfg.method, enc), enc).to_bytes())?;
    let log_path = out.join(format!("{name}.log.jsonl"));
    let mut log = Vec::new();
    trained.write_log(&mut log)?;
    write_atomic(&log_path, &log)?;

    let mut m = RunManifest::new("train", cfg.to_kv());
    m.dataset_hash = Some(ds.content_hash());
    m.inputs.push(display(dataset));
    m.checkpoints.push(display(&ckpt_path));
    m.outputs.push(display(&log_path));
    m.timings.insert("prepare".into(), prep);
    m.timings.insert("train".into(), train_secs);
    m.write(&out.join(format!("{name}.train.manifest.json")))?;
    Ok(ckpt_path)
}

/// Paths written by [`probe`].
#[derive(Clone, Debug)]
pub struct ProbeOutputs {
    pub json: PathBuf,
    pub csv: PathBuf,
    pub text: PathBuf,
}

/// Probes a frozen checkpoint. Outputs are named after the checkpoint stem.
pub fn probe(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path) -> anyhow::Result<ProbeOutputs> {
    let t = Instant::now();
    let bytes = std::fs::read(checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let ckpt = Checkpoint::read_from(&mut bytes.as_slice())?;
    let method = checkpoint_method(&ckpt)?;
    let mut enc = Encoder::<f32>::from_checkpoint(&ckpt)?;
    enc.freeze();
    let ds = load_dataset(dataset)?;
    let (split, retained) = split_and_retained(cfg, &ds)?;
    let feats = encode_splits(&enc, &ds, &split)?;
    let encode_secs = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let outcome = probe_variables(&ds, &split, &feats, &retained, &cfg.probe_config())?;
    let probe_secs = t.elapsed().as_secs_f64();
    let metadata = ReportMetadata {
        env_id: ds.env_id.clone(),
        dataset_hash: ds.content_hash(),
        encoder_hash: enc.param_hash(),
        encoder_seed: enc.config().seed,
        probe_seed: cfg.probe_seed,
        split_seed: cfg.split_seed,
        split_sizes: cfg.split_sizes(),
        dedup_replacements: split.dedup_replacements,
        entropy_threshold: cfg.entropy_threshold,
        retained: retained.iter().map(|&v| ds.variables[v].name.clone()).collect(),
        pruned: (0..ds.num_variables())
            .filter(|v| !retained.contains(v))
            .map(|v| ds.variables[v].name.clone())
            .collect(),
    };
    let report = ProbeReport::new(&method, metadata, outcome)?;

    let stem = checkpoint
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| anyhow!("checkpoint path has no file name"))?;
    let outputs = ProbeOutputs {
        json: out.join(format!("{stem}.report.json")),
        csv: out.join(format!("{stem}.report.csv")),
        text: out.join(format!("{stem}.report.txt")),
    };
    write_atomic(&outputs.json, report.to_json()?.as_bytes())?;
    write_atomic(&outputs.csv, report.to_csv()?.as_bytes())?;
    write_atomic(&outputs.text, report_text(&report).as_bytes())?;

    let mut m = RunManifest::new("probe", cfg.to_kv());
    m.dataset_hash = Some(report.metadata.dataset_hash.clone());
    m.inputs.extend([display(dataset), display(checkpoint)]);
    m.checkpoints.push(display(checkpoint));
    m.reports.extend([display(&outputs.json), display(&outputs.csv), display(&outputs.text)]);
    m.timings.insert("encode".into(), encode_secs);
    m.timings.insert("probe".into(), probe_secs);
    m.write(&out.join(format!("{stem}.probe.manifest.json")))?;
    Ok(outputs)
}

pub fn load_report(path: &Path) -> anyhow::Result<ProbeReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading report {}", path.display()))?;
    ProbeReport::from_json(&text).with_context(|| format!("parsing report {}", path.display()))
}

/// Comparison table over probe reports. With `out`, also writes
/// `report.csv` and `report.txt` there.
pub fn report(files: &[PathBuf], per_category: bool, metric: Metric, out: Option<&Path>) -> anyhow::Result<Table> {
    if files.is_empty() {
        return Err(UsageError("report needs at least one report file".into()).into());
    }
    let reports = files.iter().map(|f| load_report(f)).collect::<anyhow::Result<Vec<_>>>()?;
    let table = compare(&reports, per_category, metric)?;
    if let Some(out) = out {
        write_atomic(&out.join("report.csv"), table.to_csv()?.as_bytes())?;
        write_atomic(&out.join("report.txt"), table.to_text().as_bytes())?;
    }
    Ok(table)
}

/// Per-seed runs of several methods on one configuration: for each seed a
/// fresh dataset under `out/seed<k>`, every method trained and probed on it
/// with data, encoder, split and probe seeds all set to `k`. Returns the
/// report paths grouped by seed.
pub fn pipeline(base: &RunConfig, methods: &[MethodId], seeds: &[u64], out: &Path) -> anyhow::Result<Vec<Vec<PathBuf>>> {
    let mut all = Vec::new();
    for &seed in seeds {
        let dir = out.join(format!("seed{seed}"));
        let mut cfg = base.clone();
        cfg.data_seed = seed;
        cfg.seed = seed;
        cfg.split_seed = seed;
        cfg.probe_seed = seed;
        let data = gen_data(&cfg, &dir)?;
        let mut reports = Vec::new();
        for &m in methods {
            cfg.method = m;
            let ckpt = train(&cfg, &data, &dir)?;
            reports.push(probe(&cfg, &ckpt, &data, &dir)?.json);
        }
        all.push(reports);
    }
    Ok(all)
}
