//! Minibatch sampling over trajectory datasets.

use rand::seq::index;
use rand::Rng;

use super::dataset::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairOrigin {
    pub episode: u64,
    pub t: u32,
    /// Flat index of the anchor frame.
    pub frame: usize,
}

/// `B` temporally consecutive pairs `(x_t, x_{t+1})`.
#[derive(Clone, Debug)]
pub struct ContrastiveBatch<T: Scalar = f32> {
    /// `[B, 1, H, W]`
    pub anchors: Tensor<T>,
    /// `[B, 1, H, W]`
    pub positives: Tensor<T>,
    pub origins: Vec<PairOrigin>,
}

impl<T: Scalar> ContrastiveBatch<T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// `B` windows of `T` consecutive frames, stored time-major: row `t·B + b`
/// holds frame `t` of window `b`.
#[derive(Clone, Debug)]
pub struct SequenceBatch<T: Scalar = f32> {
    pub frames: Tensor<T>,
    pub batch: usize,
    pub len: usize,
    /// Flat index of each window's first frame.
    pub starts: Vec<usize>,
}

/// Sampling positions: flat frame indices whose window of `span` frames
/// stays inside one episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSampler {
    starts: Vec<usize>,
    span: usize,
}

impl WindowSampler {
    /// Every valid window start.
    pub fn all(ds: &TrajectoryDataset, span: usize) -> Self {
        Self::filtered(ds, span, |_, _, _| true)
    }

    /// Window starts accepted by `keep(episode, position, episode_len)`.
    pub fn filtered(ds: &TrajectoryDataset, span: usize, keep: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut starts = Vec::new();
        for (e, ep) in ds.episodes.iter().enumerate() {
            let off = ds.episode_offset(e);
            if ep.len() < span {
                continue;
            }
            for p in 0..=ep.len() - span {
                if keep(e, p, ep.len()) {
                    starts.push(off + p);
                }
            }
        }
        Self { starts, span }
    }

    /// Splits each episode into a leading part and a held-out tail holding
    /// `tail_fraction` of its frames; windows never straddle the cut.
    pub fn split_tail(ds: &TrajectoryDataset, span: usize, tail_fraction: f64) -> (Self, Self) {
        let cut = |len: usize| len - ((len as f64 * tail_fraction).round() as usize).min(len);
        let head = Self::filtered(ds, span, |_, p, len| p + span <= cut(len));
        let tail = Self::filtered(ds, span, |_, p, len| p >= cut(len));
        (head, tail)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    /// `n` distinct window starts, uniformly at random.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if n > self.starts.len() || n == 0 {
            return Err(Error::InsufficientData(format!(
                "need {n} windows of {} frames, dataset has {}",
                self.span,
                self.starts.len()
            )));
        }
        Ok(index::sample(rng, self.starts.len(), n)
            .into_iter()
            .map(|i| self.starts[i])
            .collect())
    }

    pub fn pairs<T: Scalar>(
        &self,
        ds: &TrajectoryDataset,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<ContrastiveBatch<T>> {
        if self.span != 2 {
            return Err(Error::Contract(format!("pair sampling needs span 2, sampler has {}", self.span)));
        }
        let starts = self.draw(n, rng)?;
        pair_batch(ds, &starts)
    }

    pub fn sequences<T: Scalar>(
        &self,
        ds: &TrajectoryDataset,
        n: usize,
        rng: &mut impl Rng,
    ) -> Result<SequenceBatch<T>> {
        let starts = self.draw(n, rng)?;
        sequence_batch(ds, &starts, self.span)
    }
}

/// Builds the pair batch anchored at the given flat frame indices.
pub fn pair_batch<T: Scalar>(ds: &TrajectoryDataset, starts: &[usize]) -> Result<ContrastiveBatch<T>> {
    let next: Vec<usize> = starts.iter().map(|&s| s + 1).collect();
    let origins = starts
        .iter()
        .map(|&s| {
            let (e, p) = ds.locate(s);
            let ep = &ds.episodes[e];
            if p + 1 >= ep.len() {
                return Err(Error::Contract(format!("frame {s} is the last of its episode")));
            }
            Ok(PairOrigin {
                episode: ep.id,
                t: ep.timesteps[p],
                frame: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContrastiveBatch {
        anchors: ds.frames_tensor(starts)?,
        positives: ds.frames_tensor(&next)?,
        origins,
    })
}

pub fn sequence_batch<T: Scalar>(ds: &TrajectoryDataset, starts: &[usize], len: usize) -> Result<SequenceBatch<T>> {
    let mut rows = Vec::with_capacity(starts.len() * len);
    for t in 0..len {
        rows.extend(starts.iter().map(|&s| s + t));
    }
    Ok(SequenceBatch {
        frames: ds.frames_tensor(&rows)?,
        batch: starts.len(),
        len,
        starts: starts.to_vec(),
    })
}

pub fn sample_pair_minibatch<T: Scalar>(
    ds: &TrajectoryDataset,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<ContrastiveBatch<T>> {
    WindowSampler::all(ds, 2).pairs(ds, batch, rng)
}

pub fn sample_sequence_minibatch<T: Scalar>(
    ds: &TrajectoryDataset,
    batch: usize,
    len: usize,
    rng: &mut impl Rng,
) -> Result<SequenceBatch<T>> {
    if len == 0 {
        return Err(Error::Config("sequence length must be positive".into()));
    }
    WindowSampler::all(ds, len).sequences(ds, batch, rng)
}
