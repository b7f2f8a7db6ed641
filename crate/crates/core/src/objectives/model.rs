//! Encoder plus method-specific heads, and the per-method loss dispatch.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::losses::{self, middle_slice, LossTerms, PairFeatures};
use super::modules::{Aggregator, Decoder, Gru, Linear, ProbeHeads, ScoreHeads};
use crate::autograd::{Tape, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::envstream::{ContrastiveBatch, SequenceBatch};
use crate::error::{Error, Result};
use crate::params::{Parameterized, Variable};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum MethodId {
    RandomCnn,
    Vae,
    PixelPred,
    Cpc,
    Supervised,
    Stdim,
    JsdStdim,
    GlobalTDim,
    StaticDim,
}

impl MethodId {
    pub const ALL: [MethodId; 9] = [
        MethodId::RandomCnn,
        MethodId::Vae,
        MethodId::PixelPred,
        MethodId::Cpc,
        MethodId::Supervised,
        MethodId::Stdim,
        MethodId::JsdStdim,
        MethodId::GlobalTDim,
        MethodId::StaticDim,
    ];

    pub fn id(self) -> &'static str {
        match self {
            MethodId::RandomCnn => "random-cnn",
            MethodId::Vae => "vae",
            MethodId::PixelPred => "pixel-pred",
            MethodId::Cpc => "cpc",
            MethodId::Supervised => "supervised",
            MethodId::Stdim => "stdim",
            MethodId::JsdStdim => "jsd-stdim",
            MethodId::GlobalTDim => "global-t-dim",
            MethodId::StaticDim => "static-dim",
        }
    }

    /// Whether training reads ground-truth labels.
    pub fn uses_labels(self) -> bool {
        self == MethodId::Supervised
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

impl From<MethodId> for String {
    fn from(m: MethodId) -> String {
        m.id().to_string()
    }
}

impl TryFrom<String> for MethodId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOptions {
    pub cpc_context: usize,
    pub cpc_horizons: usize,
    /// Replace the GRU with `c_t = z_t`.
    pub cpc_identity: bool,
    /// Variables predicted by the supervised method.
    pub probe_variables: Vec<String>,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            cpc_context: 16,
            cpc_horizons: 3,
            cpc_identity: false,
            probe_variables: Vec::new(),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Heads<T: Scalar = f32> {
    None,
    Score(ScoreHeads<T>),
    Global(Variable<T>),
    Vae { logvar: Linear<T>, decoder: Decoder<T> },
    PixelPred { hidden: Linear<T>, decoder: Decoder<T> },
    Cpc { aggregator: Aggregator<T>, w_k: Vec<Variable<T>> },
    Supervised(ProbeHeads<T>),
}

impl<T: Scalar> Parameterized<T> for Heads<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        match self {
            Heads::None => Vec::new(),
            Heads::Score(h) => h.params(),
            Heads::Global(w) => vec![w],
            Heads::Vae { logvar, decoder } => [logvar.params(), decoder.params()].concat(),
            Heads::PixelPred { hidden, decoder } => [hidden.params(), decoder.params()].concat(),
            Heads::Cpc { aggregator, w_k } => {
                let mut v = aggregator.params();
                v.extend(w_k.iter());
                v
            }
            Heads::Supervised(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        match self {
            Heads::None => Vec::new(),
            Heads::Score(h) => h.params_mut(),
            Heads::Global(w) => vec![w],
            Heads::Vae { logvar, decoder } => {
                let mut v = logvar.params_mut();
                v.extend(decoder.params_mut());
                v
            }
            Heads::PixelPred { hidden, decoder } => {
                let mut v = hidden.params_mut();
                v.extend(decoder.params_mut());
                v
            }
            Heads::Cpc { aggregator, w_k } => {
                let mut v = aggregator.params_mut();
                v.extend(w_k.iter_mut());
                v
            }
            Heads::Supervised(p) => p.params_mut(),
        }
    }
}

/// What one training step consumes.
#[derive(Clone, Debug)]
pub enum Batch<T: Scalar = f32> {
    Pairs(ContrastiveBatch<T>),
    /// Own frames plus frames from a different environment.
    Static { anchors: Tensor<T>, foreign: Tensor<T> },
    /// Frames with, for the supervised method, one label vector per variable.
    Frames { frames: Tensor<T>, labels: Vec<Vec<usize>> },
    Sequences(SequenceBatch<T>),
}

impl<T: Scalar> Batch<T> {
    fn kind(&self) -> &'static str {
        match self {
            Batch::Pairs(_) => "pairs",
            Batch::Static { .. } => "static",
            Batch::Frames { .. } => "frames",
            Batch::Sequences(_) => "sequences",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub method: MethodId,
    pub encoder: Encoder<T>,
    pub heads: Heads<T>,
    pub options: ModelOptions,
}

impl<T: Scalar> Model<T> {
    /// Encoder weights come from `encoder.seed`; head weights from a
    /// separate stream of the same seed.
    pub fn new(method: MethodId, encoder: EncoderConfig, options: ModelOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(encoder.seed);
        rng.set_stream(1);
        let enc = Encoder::new(encoder)?;
        let f = enc.feature_dim();
        let (_, _, d) = enc.local_grid();
        let heads = match method {
            MethodId::RandomCnn => Heads::None,
            MethodId::Stdim | MethodId::JsdStdim | MethodId::StaticDim => Heads::Score(ScoreHeads::new(f, d, &mut rng)),
            MethodId::GlobalTDim => Heads::Global(Variable::uniform(
                "heads.w",
                &[f, f],
                (1.0 / f as f64).sqrt(),
                &mut rng,
            )),
            MethodId::Vae => Heads::Vae {
                logvar: Linear::new("vae.logvar", enc.flat_dim(), f, &mut rng),
                decoder: Decoder::new(enc.config(), f, &mut rng)?,
            },
            MethodId::PixelPred => Heads::PixelPred {
                hidden: Linear::new("pixel_pred.hidden", f, f, &mut rng),
                decoder: Decoder::new(enc.config(), f, &mut rng)?,
            },
            MethodId::Cpc => {
                if options.cpc_context == 0 || options.cpc_horizons == 0 {
                    return Err(Error::Config("cpc context and horizons must be positive".into()));
                }
                let aggregator = if options.cpc_identity {
                    Aggregator::Identity
                } else {
                    Aggregator::Gru(Gru::new(f, f, &mut rng))
                };
                let c = aggregator.output_dim(f);
                let w_k = (1..=options.cpc_horizons)
                    .map(|k| Variable::uniform(format!("cpc.w{k}"), &[c, f], (1.0 / c as f64).sqrt(), &mut rng))
                    .collect();
                Heads::Cpc { aggregator, w_k }
            }
            MethodId::Supervised => {
                if options.probe_variables.is_empty() {
                    return Err(Error::Config("supervised training needs at least one variable".into()));
                }
                Heads::Supervised(ProbeHeads::new(&options.probe_variables, f, &mut rng))
            }
        };
        Ok(Self {
            method,
            encoder: enc,
            heads,
            options,
        })
    }

    fn mismatch(&self, batch: &Batch<T>) -> Error {
        Error::Contract(format!("method {} cannot train on a {} batch", self.method, batch.kind()))
    }

    /// Records this method's loss for `batch` on `tape`. `rng` feeds the
    /// VAE's reparameterization noise and is untouched by other methods.
    pub fn loss<'t>(&self, tape: &'t Tape<T>, batch: &Batch<T>, rng: &mut impl Rng) -> Result<LossTerms<'t, T>> {
        let enc = &self.encoder;
        match (&self.heads, batch) {
            (Heads::Score(h), Batch::Pairs(p)) if matches!(self.method, MethodId::Stdim | MethodId::JsdStdim) => {
                let f = pair_features(enc, tape, p)?;
                let (wg, wl) = (tape.bind(&h.w_g), tape.bind(&h.w_l));
                if self.method == MethodId::Stdim {
                    losses::stdim_terms(&f, wg, wl)
                } else {
                    losses::jsd_stdim_terms(&f, wg, wl)
                }
            }
            (Heads::Global(w), Batch::Pairs(p)) => {
                let b = p.len();
                let both = Tensor::concat_outer(&[&p.anchors, &p.positives])?;
                let e = enc.forward(tape, tape.constant(both))?;
                losses::global_t_dim_terms(
                    e.global.slice_outer(0, b)?,
                    tape.bind(w),
                    e.global.slice_outer(b, b)?,
                )
            }
            (Heads::Score(h), Batch::Static { anchors, foreign }) if self.method == MethodId::StaticDim => {
                let b = anchors.dim(0);
                if b < 2 || foreign.dim(0) + 1 < b {
                    return Err(Error::InsufficientData(format!(
                        "static-dim needs {} foreign frames for a batch of {b}, got {}",
                        b.saturating_sub(1),
                        foreign.dim(0)
                    )));
                }
                let head = foreign.slice_outer(0, b - 1)?;
                let e = enc.forward(tape, tape.constant(Tensor::concat_outer(&[anchors, &head])?))?;
                losses::static_dim_terms(e.global, e.local, b, tape.bind(&h.w_g), tape.bind(&h.w_l))
            }
            (Heads::Vae { logvar, decoder }, Batch::Frames { frames, .. }) => {
                let x = tape.constant(frames.clone());
                let e = enc.forward(tape, x)?;
                let mu = e.global;
                let lv = logvar.forward(tape, e.flat)?;
                let noise = Tensor::from_fn(&mu.shape(), |_| T::of(rng.sample::<f64, _>(StandardNormal)));
                let z = mu.add(lv.scale(0.5).exp().mul(tape.constant(noise))?)?;
                let recon = losses::summed_squared_error(decoder.forward(tape, z)?, x)?;
                let kl = losses::gaussian_kl(mu, lv)?;
                LossTerms::summed(vec![("recon".into(), recon), ("kl".into(), kl)], None)
            }
            (Heads::PixelPred { hidden, decoder }, Batch::Pairs(p)) => {
                let e = enc.forward(tape, tape.constant(p.anchors.clone()))?;
                let h = hidden.forward(tape, e.global)?.relu();
                let pred = decoder.forward(tape, h)?;
                let mse = losses::mean_squared_error(pred, tape.constant(p.positives.clone()))?;
                LossTerms::summed(vec![("recon".into(), mse)], None)
            }
            (Heads::Cpc { aggregator, w_k }, Batch::Sequences(s)) => {
                let e = enc.forward(tape, tape.constant(s.frames.clone()))?;
                let zs = (0..s.len)
                    .map(|t| e.global.slice_outer(t * s.batch, s.batch))
                    .collect::<Result<Vec<_>>>()?;
                let k = w_k.len();
                if s.len < self.options.cpc_context + k {
                    return Err(Error::InsufficientData(format!(
                        "cpc needs sequences of at least {} frames, got {}",
                        self.options.cpc_context + k,
                        s.len
                    )));
                }
                let contexts = aggregator.contexts(tape, &zs[..s.len - k])?;
                let ws: Vec<Var<'t, T>> = w_k.iter().map(|w| tape.bind(w)).collect();
                cpc_terms(&contexts, &zs, &ws, self.options.cpc_context)
            }
            (Heads::Supervised(p), Batch::Frames { frames, labels }) => {
                let e = enc.forward(tape, tape.constant(frames.clone()))?;
                losses::supervised_terms(&p.logits(tape, e.global)?, labels)
            }
            (Heads::None, _) => Err(Error::Contract(format!("method {} has no training loss", self.method))),
            _ => Err(self.mismatch(batch)),
        }
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn params(&self) -> Vec<&Variable<T>> {
        let mut v = self.encoder.params();
        v.extend(self.heads.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        let mut v = self.encoder.params_mut();
        v.extend(self.heads.params_mut());
        v
    }
}

/// Encodes anchors and positives in one pass.
pub fn pair_features<'t, T: Scalar>(
    enc: &Encoder<T>,
    tape: &'t Tape<T>,
    p: &ContrastiveBatch<T>,
) -> Result<PairFeatures<'t, T>> {
    let b = p.len();
    let both = Tensor::concat_outer(&[&p.anchors, &p.positives])?;
    let e = enc.forward(tape, tape.constant(both))?;
    Ok(PairFeatures {
        global_t: e.global.slice_outer(0, b)?,
        local_t: middle_slice(e.local, 0, b)?,
        global_next: e.global.slice_outer(b, b)?,
        local_next: middle_slice(e.local, b, b)?,
    })
}

/// Predictive InfoNCE: for each horizon `k`, scores `c_tᵀ W_k z_{t+k}`
/// against the other sequences' `z_{t+k}`. Uses `t` from `context − 1` to
/// `T − 1 − K`. Component `k{k}` is the mean over `t`; the total is the mean
/// of the components.
pub fn cpc_terms<'t, T: Scalar>(
    contexts: &[Var<'t, T>],
    zs: &[Var<'t, T>],
    w_k: &[Var<'t, T>],
    context: usize,
) -> Result<LossTerms<'t, T>> {
    let (len, horizons) = (zs.len(), w_k.len());
    if context == 0 || horizons == 0 || len < context + horizons {
        return Err(Error::InsufficientData(format!(
            "cpc with context {context} and {horizons} horizons needs {} steps, got {len}",
            context + horizons
        )));
    }
    let last = len - 1 - horizons;
    if contexts.len() <= last {
        return Err(Error::dim("cpc", "contexts", last + 1, contexts.len()));
    }
    let n_t = last + 2 - context;
    let mut comps = Vec::with_capacity(horizons);
    let (mut hits, mut rows) = (0usize, 0usize);
    for (k, &w) in w_k.iter().enumerate() {
        let mut acc: Option<Var<'t, T>> = None;
        for t in context - 1..=last {
            let scores = contexts[t].bilinear(w, zs[t + k + 1])?;
            let b = scores.shape()[0];
            hits += losses::hits(&scores.value(), &(0..b).collect::<Vec<_>>(), None);
            rows += b;
            let l = losses::infonce(scores)?;
            acc = Some(match acc {
                None => l,
                Some(a) => a.add(l)?,
            });
        }
        let mean = acc.expect("at least one step").scale(1.0 / n_t as f64);
        comps.push((format!("k{}", k + 1), mean));
    }
    let summed = LossTerms::summed(comps, Some(hits as f64 / rows as f64))?;
    Ok(LossTerms {
        total: summed.total.scale(1.0 / horizons as f64),
        ..summed
    })
}
