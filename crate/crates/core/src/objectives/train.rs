//! Encoder training loop.

use std::io::Write;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::LossReport;
use super::model::{Batch, MethodId, Model, ModelOptions};
use crate::autograd::Tape;
use crate::encoder::EncoderConfig;
use crate::envstream::{pair_batch, sequence_batch, TrajectoryDataset, WindowSampler};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig, PlateauScheduler};
use crate::params::Parameterized;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: MethodId,
    /// `encoder.seed` is replaced by `seed`.
    pub encoder: EncoderConfig,
    pub options: ModelOptions,
    pub steps: usize,
    pub batch_size: usize,
    /// Number of windows per CPC batch.
    pub sequence_batch: usize,
    pub sequence_len: usize,
    pub lr: f64,
    /// Steps between held-out evaluations.
    pub eval_every: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Tail fraction of every episode held out for validation.
    pub val_fraction: f64,
    pub val_batches: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: MethodId::Stdim,
            encoder: EncoderConfig::default(),
            options: ModelOptions::default(),
            steps: 2000,
            batch_size: 64,
            sequence_batch: 8,
            sequence_len: 20,
            lr: 3e-4,
            eval_every: 200,
            plateau_patience: 5,
            plateau_factor: 0.5,
            val_fraction: 0.1,
            val_batches: 2,
            log_every: 10,
            seed: 0,
        }
    }
}

/// Labelled frame indices for the supervised method.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Dataset variable indices to predict.
    pub variables: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub dataset: &'a TrajectoryDataset,
    /// Frames of a different environment (static-dim negatives).
    pub foreign: Option<&'a TrajectoryDataset>,
    pub labels: Option<&'a LabelSplit>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub phase: Phase,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

pub struct Trained {
    pub model: Model<f32>,
    pub log: Vec<LogRecord>,
}

impl Trained {
    /// Writes the log as one JSON object per line.
    pub fn write_log(&self, w: &mut impl Write) -> Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

enum Source<'a> {
    Pairs(WindowSampler),
    Static {
        frames: Vec<usize>,
        foreign: &'a TrajectoryDataset,
    },
    Frames {
        frames: Vec<usize>,
        variables: Vec<usize>,
    },
    Sequences(WindowSampler),
}

fn draw_frames(pool: &[usize], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if n == 0 || n > pool.len() {
        return Err(Error::InsufficientData(format!("need {n} frames, have {}", pool.len())));
    }
    Ok(index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
}

impl Source<'_> {
    fn batch(&self, ds: &TrajectoryDataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch<f32>> {
        match self {
            Source::Pairs(s) => Ok(Batch::Pairs(pair_batch(ds, &s.draw(cfg.batch_size, rng)?)?)),
            Source::Sequences(s) => Ok(Batch::Sequences(sequence_batch(
                ds,
                &s.draw(cfg.sequence_batch, rng)?,
                cfg.sequence_len,
            )?)),
            Source::Static { frames, foreign } => {
                let own = draw_frames(frames, cfg.batch_size, rng)?;
                let all: Vec<usize> = (0..foreign.num_frames()).collect();
                let other = draw_frames(&all, cfg.batch_size.saturating_sub(1).max(1), rng)?;
                Ok(Batch::Static {
                    anchors: ds.frames_tensor(&own)?,
                    foreign: foreign.frames_tensor(&other)?,
                })
            }
            Source::Frames { frames, variables } => {
                let picked = draw_frames(frames, cfg.batch_size.min(frames.len()), rng)?;
                let labels = variables
                    .iter()
                    .map(|&v| picked.iter().map(|&f| ds.labels(f)[v] as usize).collect())
                    .collect();
                Ok(Batch::Frames {
                    frames: ds.frames_tensor(&picked)?,
                    labels,
                })
            }
        }
    }
}

fn sources<'a>(cfg: &TrainConfig, data: &TrainData<'a>) -> Result<(Source<'a>, Source<'a>)> {
    let ds = data.dataset;
    let frames_split = || {
        let (head, tail) = WindowSampler::split_tail(ds, 1, cfg.val_fraction);
        (head.starts().to_vec(), tail.starts().to_vec())
    };
    Ok(match cfg.method {
        MethodId::Stdim | MethodId::JsdStdim | MethodId::GlobalTDim | MethodId::PixelPred => {
            let (a, b) = WindowSampler::split_tail(ds, 2, cfg.val_fraction);
            (Source::Pairs(a), Source::Pairs(b))
        }
        MethodId::Cpc => {
            let (a, b) = WindowSampler::split_tail(ds, cfg.sequence_len, cfg.val_fraction);
            (Source::Sequences(a), Source::Sequences(b))
        }
        MethodId::StaticDim => {
            let foreign = data
                .foreign
                .ok_or_else(|| Error::Config("static-dim needs a foreign dataset".into()))?;
            let (a, b) = frames_split();
            (Source::Static { frames: a, foreign }, Source::Static { frames: b, foreign })
        }
        MethodId::Vae => {
            let (a, b) = frames_split();
            (
                Source::Frames {
                    frames: a,
                    variables: Vec::new(),
                },
                Source::Frames {
                    frames: b,
                    variables: Vec::new(),
                },
            )
        }
        MethodId::Supervised => {
            let l = data
                .labels
                .ok_or_else(|| Error::Config("supervised training needs a labelled split".into()))?;
            (
                Source::Frames {
                    frames: l.train.clone(),
                    variables: l.variables.clone(),
                },
                Source::Frames {
                    frames: l.val.clone(),
                    variables: l.variables.clone(),
                },
            )
        }
        MethodId::RandomCnn => unreachable!("random-cnn does not train"),
    })
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Trains an encoder with `cfg.method`. Deterministic given the config and data.
pub fn train_encoder(cfg: &TrainConfig, data: TrainData<'_>) -> Result<Trained> {
    let mut options = cfg.options.clone();
    if cfg.method == MethodId::Supervised {
        let l = data
            .labels
            .ok_or_else(|| Error::Config("supervised training needs a labelled split".into()))?;
        options.probe_variables = l
            .variables
            .iter()
            .map(|&v| data.dataset.variables[v].name.clone())
            .collect();
    }
    let encoder = EncoderConfig {
        seed: cfg.seed,
        ..cfg.encoder.clone()
    };
    let mut model = Model::new(cfg.method, encoder, options)?;
    if cfg.method == MethodId::RandomCnn || cfg.steps == 0 {
        return Ok(Trained {
            model,
            log: Vec::new(),
        });
    }
    if cfg.batch_size < 2 || cfg.eval_every == 0 || cfg.log_every == 0 {
        return Err(Error::Config("batch_size ≥ 2, eval_every and log_every > 0 required".into()));
    }

    let (train_src, val_src) = sources(cfg, &data)?;
    let ds = data.dataset;
    let mut val_rng = seeded(cfg.seed, 4);
    let val: Vec<Batch<f32>> = (0..cfg.val_batches)
        .map(|_| val_src.batch(ds, cfg, &mut val_rng))
        .collect::<Result<_>>()?;

    let mut batch_rng = seeded(cfg.seed, 2);
    let mut noise_rng = seeded(cfg.seed, 3);
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut log = Vec::new();
    for step in 1..=cfg.steps {
        let batch = train_src.batch(ds, cfg, &mut batch_rng)?;
        model.zero_grad();
        let report = {
            let tape = Tape::new();
            let terms = model.loss(&tape, &batch, &mut noise_rng)?;
            let report = terms.report()?;
            if !report.total.is_finite() {
                return Err(Error::Diverged {
                    step,
                    value: report.total,
                });
            }
            tape.backward_into(terms.total, &mut model)?;
            report
        };
        adam.step(&mut model.params_mut())?;
        if step == 1 || step % cfg.log_every == 0 {
            log.push(LogRecord {
                step,
                phase: Phase::Train,
                lr: adam.lr(),
                loss: report,
            });
        }
        if step % cfg.eval_every == 0 && !val.is_empty() {
            let v = evaluate(&model, &val, cfg.seed)?;
            let lr = sched.observe(v.total, adam.lr());
            log.push(LogRecord {
                step,
                phase: Phase::Val,
                lr: adam.lr(),
                loss: v,
            });
            adam.set_lr(lr);
        }
    }
    Ok(Trained { model, log })
}

/// Mean loss over fixed batches, without touching parameters.
pub fn evaluate(model: &Model<f32>, batches: &[Batch<f32>], seed: u64) -> Result<LossReport> {
    let mut noise = seeded(seed, 5);
    let mut total = 0.0;
    let mut components = std::collections::BTreeMap::new();
    let mut acc = None;
    for b in batches {
        let tape = Tape::new();
        let r = model.loss(&tape, b, &mut noise)?.report()?;
        total += r.total;
        for (k, v) in r.components {
            *components.entry(k).or_insert(0.0) += v;
        }
        if let Some(a) = r.accuracy {
            *acc.get_or_insert(0.0) += a;
        }
    }
    let n = batches.len().max(1) as f64;
    components.values_mut().for_each(|v| *v /= n);
    Ok(LossReport {
        total: total / n,
        components,
        accuracy: acc.map(|a: f64| a / n),
    })
}
