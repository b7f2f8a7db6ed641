//! Flat `key = value` run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! `--set key=value` flags in command-line order. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use stdim_core::encoder::EncoderConfig;
use stdim_core::envstream::{CollectConfig, Policy, SpriteWorldConfig};
use stdim_core::objectives::{MethodId, ModelOptions, TrainConfig};
use stdim_core::probe::{ProbeConfig, SplitSizes};

use crate::UsageError;

/// Every accepted key with its meaning, in canonical order.
pub const KEYS: &[(&str, &str)] = &[
    ("env", "environment id: spriteworld | spriteworld-foreign"),
    ("episode_len", "steps per episode"),
    ("room_period", "steps between room (background) switches"),
    ("lives_decoy", "render a constant lives counter (true | false)"),
    ("policy", "collection policy: random | scripted"),
    ("epsilon", "random-action probability of the scripted policy"),
    ("workers", "independent collection workers"),
    ("frames_per_worker", "frames collected by each worker"),
    ("data_seed", "collection seed"),
    ("foreign_frames_per_worker", "frames per worker of the foreign set used by static-dim"),
    ("method", "stdim | jsd-stdim | global-t-dim | static-dim | vae | pixel-pred | cpc | supervised | random-cnn"),
    ("seed", "encoder initialization and training seed"),
    ("steps", "encoder training steps"),
    ("batch_size", "frames or pairs per training step"),
    ("lr", "encoder learning rate"),
    ("eval_every", "steps between validation rounds"),
    ("plateau_patience", "validation rounds without improvement before the lr halves"),
    ("plateau_factor", "lr multiplier on a plateau"),
    ("log_every", "steps between training log records"),
    ("feature_dim", "representation size F"),
    ("sequence_batch", "cpc windows per step"),
    ("sequence_len", "cpc window length"),
    ("cpc_context", "cpc context length"),
    ("cpc_horizons", "cpc prediction horizons K"),
    ("split_train", "probe train frames"),
    ("split_val", "probe validation frames"),
    ("split_test", "probe test frames"),
    ("split_seed", "probe split seed"),
    ("entropy_threshold", "variables below this entropy (nats) are not probed"),
    ("probe_seed", "probe training seed"),
    ("probe_lr", "probe learning rate"),
    ("probe_batch", "probe batch size"),
    ("probe_steps", "probe step budget"),
    ("probe_eval_every", "probe steps between validation rounds"),
    ("probe_patience", "probe validation rounds without improvement before stopping"),
    ("probe_standardize", "z-score features before probing (true | false)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: String,
    pub episode_len: u32,
    pub room_period: u32,
    pub lives_decoy: bool,
    pub policy: Policy,
    pub epsilon: f64,
    pub workers: usize,
    pub frames_per_worker: usize,
    pub data_seed: u64,
    pub foreign_frames_per_worker: usize,
    pub method: MethodId,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub log_every: usize,
    pub feature_dim: usize,
    pub sequence_batch: usize,
    pub sequence_len: usize,
    pub cpc_context: usize,
    pub cpc_horizons: usize,
    pub split_train: usize,
    pub split_val: usize,
    pub split_test: usize,
    pub split_seed: u64,
    pub entropy_threshold: f64,
    pub probe_seed: u64,
    pub probe_lr: f64,
    pub probe_batch: usize,
    pub probe_steps: usize,
    pub probe_eval_every: usize,
    pub probe_patience: usize,
    pub probe_standardize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = SpriteWorldConfig::default();
        let train = TrainConfig::default();
        let opts = ModelOptions::default();
        let probe = ProbeConfig::default();
        let split = SplitSizes::default();
        Self {
            env: env.env_id(),
            episode_len: env.episode_len,
            room_period: env.room_period,
            lives_decoy: env.lives_decoy,
            policy: Policy::Random,
            epsilon: 0.2,
            workers: 8,
            // 10,000 frames: the default splits plus room for dedup
            frames_per_worker: 1250,
            data_seed: 0,
            foreign_frames_per_worker: 100,
            method: MethodId::Stdim,
            seed: 0,
            steps: train.steps,
            batch_size: train.batch_size,
            lr: train.lr,
            eval_every: train.eval_every,
            plateau_patience: train.plateau_patience,
            plateau_factor: train.plateau_factor,
            log_every: train.log_every,
            feature_dim: train.encoder.feature_dim,
            sequence_batch: train.sequence_batch,
            sequence_len: train.sequence_len,
            cpc_context: opts.cpc_context,
            cpc_horizons: opts.cpc_horizons,
            split_train: split.train,
            split_val: split.val,
            split_test: split.test,
            split_seed: 0,
            entropy_threshold: 0.6,
            probe_seed: 0,
            probe_lr: probe.lr,
            probe_batch: probe.batch_size,
            probe_steps: probe.max_steps,
            probe_eval_every: probe.eval_every,
            probe_patience: probe.patience,
            probe_standardize: probe.standardize,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Defaults overlaid with `text`.
    pub fn from_kv(text: &str) -> Result<Self, UsageError> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_kv(&text)
    }

    pub fn apply_kv(&mut self, text: &str) -> Result<(), UsageError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| UsageError(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), UsageError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| UsageError(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UsageError> {
        match key {
            "env" => {
                if value != "spriteworld" && value != "spriteworld-foreign" {
                    return Err(UsageError(format!("unknown env `{value}`")));
                }
                self.env = value.to_string();
            }
            "episode_len" => self.episode_len = parse(key, value)?,
            "room_period" => self.room_period = parse(key, value)?,
            "lives_decoy" => self.lives_decoy = parse(key, value)?,
            "policy" => {
                self.policy = Policy::from_name(value).ok_or_else(|| UsageError(format!("unknown policy `{value}`")))?
            }
            "epsilon" => self.epsilon = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "frames_per_worker" => self.frames_per_worker = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "foreign_frames_per_worker" => self.foreign_frames_per_worker = parse(key, value)?,
            "method" => {
                self.method = value
                    .parse()
                    .map_err(|_| UsageError(format!("unknown method `{value}`")))?
            }
            "seed" => self.seed = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "plateau_factor" => self.plateau_factor = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "feature_dim" => self.feature_dim = parse(key, value)?,
            "sequence_batch" => self.sequence_batch = parse(key, value)?,
            "sequence_len" => self.sequence_len = parse(key, value)?,
            "cpc_context" => self.cpc_context = parse(key, value)?,
            "cpc_horizons" => self.cpc_horizons = parse(key, value)?,
            "split_train" => self.split_train = parse(key, value)?,
            "split_val" => self.split_val = parse(key, value)?,
            "split_test" => self.split_test = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "entropy_threshold" => self.entropy_threshold = parse(key, value)?,
            "probe_seed" => self.probe_seed = parse(key, value)?,
            "probe_lr" => self.probe_lr = parse(key, value)?,
            "probe_batch" => self.probe_batch = parse(key, value)?,
            "probe_steps" => self.probe_steps = parse(key, value)?,
            "probe_eval_every" => self.probe_eval_every = parse(key, value)?,
            "probe_patience" => self.probe_patience = parse(key, value)?,
            "probe_standardize" => self.probe_standardize = parse(key, value)?,
            _ => return Err(UsageError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text: every key in [`KEYS`] order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, _) in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "env" => self.env.clone(),
            "episode_len" => self.episode_len.to_string(),
            "room_period" => self.room_period.to_string(),
            "lives_decoy" => self.lives_decoy.to_string(),
            "policy" => self.policy.name().to_string(),
            "epsilon" => self.epsilon.to_string(),
            "workers" => self.workers.to_string(),
            "frames_per_worker" => self.frames_per_worker.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "foreign_frames_per_worker" => self.foreign_frames_per_worker.to_string(),
            "method" => self.method.id().to_string(),
            "seed" => self.seed.to_string(),
            "steps" => self.steps.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "plateau_patience" => self.plateau_patience.to_string(),
            "plateau_factor" => self.plateau_factor.to_string(),
            "log_every" => self.log_every.to_string(),
            "feature_dim" => self.feature_dim.to_string(),
            "sequence_batch" => self.sequence_batch.to_string(),
            "sequence_len" => self.sequence_len.to_string(),
            "cpc_context" => self.cpc_context.to_string(),
            "cpc_horizons" => self.cpc_horizons.to_string(),
            "split_train" => self.split_train.to_string(),
            "split_val" => self.split_val.to_string(),
            "split_test" => self.split_test.to_string(),
            "split_seed" => self.split_seed.to_string(),
            "entropy_threshold" => self.entropy_threshold.to_string(),
            "probe_seed" => self.probe_seed.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "probe_batch" => self.probe_batch.to_string(),
            "probe_steps" => self.probe_steps.to_string(),
            "probe_eval_every" => self.probe_eval_every.to_string(),
            "probe_patience" => self.probe_patience.to_string(),
            "probe_standardize" => self.probe_standardize.to_string(),
            _ => unreachable!("KEYS and get() list the same keys"),
        }
    }

    pub fn env_config(&self) -> SpriteWorldConfig {
        let base = if self.env == "spriteworld-foreign" {
            SpriteWorldConfig::foreign()
        } else {
            SpriteWorldConfig::default()
        };
        SpriteWorldConfig {
            episode_len: self.episode_len,
            room_period: self.room_period,
            lives_decoy: self.lives_decoy,
            ..base
        }
    }

    pub fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            env: self.env_config(),
            policy: self.policy,
            epsilon: self.epsilon,
            workers: self.workers,
            frames_per_worker: self.frames_per_worker,
            seed: self.data_seed,
        }
    }

    /// Out-of-environment frames for static-dim, seeded apart from the data.
    pub fn foreign_config(&self) -> CollectConfig {
        CollectConfig {
            env: SpriteWorldConfig {
                episode_len: self.episode_len,
                room_period: self.room_period,
                ..SpriteWorldConfig::foreign()
            },
            policy: Policy::Random,
            epsilon: self.epsilon,
            workers: self.workers,
            frames_per_worker: self.foreign_frames_per_worker,
            seed: self.data_seed.wrapping_add(1),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let base = TrainConfig::default();
        TrainConfig {
            method: self.method,
            encoder: EncoderConfig {
                feature_dim: self.feature_dim,
                ..base.encoder.clone()
            },
            options: ModelOptions {
                cpc_context: self.cpc_context,
                cpc_horizons: self.cpc_horizons,
                ..ModelOptions::default()
            },
            steps: self.steps,
            batch_size: self.batch_size,
            sequence_batch: self.sequence_batch,
            sequence_len: self.sequence_len,
            lr: self.lr,
            eval_every: self.eval_every,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            log_every: self.log_every,
            seed: self.seed,
            ..base
        }
    }

    pub fn split_sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.split_train,
            val: self.split_val,
            test: self.split_test,
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            lr: self.probe_lr,
            batch_size: self.probe_batch,
            max_steps: self.probe_steps,
            eval_every: self.probe_eval_every,
            patience: self.probe_patience,
            standardize: self.probe_standardize,
            seed: self.probe_seed,
            ..ProbeConfig::default()
        }
    }
}
