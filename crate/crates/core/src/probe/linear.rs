//! 256-way linear probes trained on frozen features.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::objectives::PROBE_CLASSES;
use crate::optim::{Adam, AdamConfig, EarlyStopping, PlateauScheduler};
use crate::params::{Parameterized, Variable};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Upper bound; early stopping usually ends training well before it.
    pub max_steps: usize,
    pub eval_every: usize,
    /// Early-stopping patience in evaluation rounds.
    pub patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Z-score features with train statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 64,
            max_steps: 35_000,
            eval_every: 100,
            patience: 10,
            plateau_patience: 5,
            plateau_factor: 0.5,
            standardize: false,
            seed: 0,
        }
    }
}

/// Per-feature affine normalization fitted on train features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(features: &Tensor<f32>) -> Result<Self> {
        if features.ndim() != 2 || features.dim(0) == 0 {
            return Err(Error::shape("standardize", format!("need [n, F] features, got {:?}", features.shape())));
        }
        let (n, f) = (features.dim(0), features.dim(1));
        let mut mean = vec![0.0f64; f];
        let mut sq = vec![0.0f64; f];
        for row in features.data().chunks_exact(f) {
            for (j, &x) in row.iter().enumerate() {
                mean[j] += x as f64;
                sq[j] += x as f64 * x as f64;
            }
        }
        let mut inv_std = Vec::with_capacity(f);
        for j in 0..f {
            mean[j] /= n as f64;
            let var = (sq[j] / n as f64 - mean[j] * mean[j]).max(0.0);
            inv_std.push(if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 });
        }
        Ok(Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            inv_std,
        })
    }

    pub fn apply(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let f = self.mean.len();
        if features.ndim() != 2 || features.dim(1) != f {
            return Err(Error::dim("standardize", "features", f, *features.shape().last().unwrap_or(&0)));
        }
        let data = features
            .data()
            .chunks_exact(f)
            .flat_map(|row| row.iter().enumerate().map(|(j, &x)| (x - self.mean[j]) * self.inv_std[j]))
            .collect();
        Tensor::new(features.shape(), data)
    }
}

#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// `[256, F]`
    pub weight: Variable<f32>,
    /// `[256]`
    pub bias: Variable<f32>,
}

impl LinearProbe {
    /// Zero-initialized probe.
    pub fn new(name: &str, feature_dim: usize) -> Self {
        Self {
            weight: Variable::zeros(format!("probe.{name}.weight"), &[PROBE_CLASSES, feature_dim]),
            bias: Variable::zeros(format!("probe.{name}.bias"), &[PROBE_CLASSES]),
        }
    }

    pub fn logits(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let out = tape
            .constant(features.clone())
            .affine(tape.bind(&self.weight), tape.bind(&self.bias))?;
        Ok((*out.value()).clone())
    }

    /// Arg-max class per row; ties go to the smallest class.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<u8>> {
        let logits = self.logits(features)?;
        Ok(logits
            .data()
            .chunks_exact(PROBE_CLASSES)
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect())
    }

    /// Mean cross-entropy over all rows.
    pub fn loss(&self, features: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let l = tape
            .constant(features.clone())
            .affine(tape.bind(&self.weight), tape.bind(&self.bias))?
            .cross_entropy(labels)?;
        Ok(l.item()? as f64)
    }
}

impl Parameterized<f32> for LinearProbe {
    fn params(&self) -> Vec<&Variable<f32>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<f32>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct ProbeFit {
    /// Parameters at the best validation loss.
    pub probe: LinearProbe,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps_run: usize,
    pub stopped_early: bool,
}

fn check_labels(labels: &[usize], rows: usize, what: &str) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim("train_probe", what, rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= PROBE_CLASSES) {
        return Err(Error::Index {
            op: "train_probe",
            index: bad,
            bound: PROBE_CLASSES,
        });
    }
    Ok(())
}

/// Trains one probe with Adam on mini-batches of `train`, evaluating the
/// full validation set every `eval_every` steps. The learning rate halves
/// on validation plateaus; training stops after `patience` rounds without
/// a new best and the best parameters are returned.
pub fn train_probe(
    name: &str,
    train: (&Tensor<f32>, &[usize]),
    val: (&Tensor<f32>, &[usize]),
    cfg: &ProbeConfig,
) -> Result<ProbeFit> {
    let (tx, ty) = train;
    let (vx, vy) = val;
    if tx.ndim() != 2 || vx.ndim() != 2 || tx.dim(1) != vx.dim(1) {
        return Err(Error::shape(
            "train_probe",
            format!("train {:?} and val {:?} features must be [n, F] with equal F", tx.shape(), vx.shape()),
        ));
    }
    let n = tx.dim(0);
    if n == 0 || vx.dim(0) == 0 {
        return Err(Error::InsufficientData("probe needs train and validation frames".into()));
    }
    check_labels(ty, n, "train labels")?;
    check_labels(vy, vx.dim(0), "val labels")?;
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Config("probe batch_size and eval_every must be positive".into()));
    }

    let mut probe = LinearProbe::new(name, tx.dim(1));
    let mut adam = Adam::<f32>::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    })?;
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stop = EarlyStopping::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_steps = cfg.max_steps.max(1);
    let batch = cfg.batch_size.min(n);

    let mut best = ProbeFit {
        probe: probe.clone(),
        best_step: 0,
        best_val_loss: probe.loss(vx, vy)?,
        steps_run: 0,
        stopped_early: false,
    };
    for step in 1..=max_steps {
        let rows: Vec<usize> = index::sample(&mut rng, n, batch).into_vec();
        let x = tx.gather_outer(&rows)?;
        let y: Vec<usize> = rows.iter().map(|&r| ty[r]).collect();
        probe.zero_grad();
        {
            let tape = Tape::new();
            let loss = tape
                .constant(x)
                .affine(tape.bind(&probe.weight), tape.bind(&probe.bias))?
                .cross_entropy(&y)?;
            tape.backward_into(loss, &mut probe)?;
        }
        adam.step(&mut probe.params_mut())?;
        best.steps_run = step;
        if step % cfg.eval_every == 0 || step == max_steps {
            let v = probe.loss(vx, vy)?;
            adam.set_lr(sched.observe(v, adam.lr()));
            if stop.observe(v) && v < best.best_val_loss {
                best.probe = probe.clone();
                best.best_step = step;
                best.best_val_loss = v;
            }
            if stop.should_stop() {
                best.stopped_early = true;
                break;
            }
        }
    }
    Ok(best)
}
