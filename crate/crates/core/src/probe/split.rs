//! Variable pruning and deduplicated train/val/test splits.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::entropy;
use crate::envstream::TrajectoryDataset;
use crate::error::{Error, Result};

/// Indices of variables whose entropy over `frames` is at least `threshold`.
pub fn prune_low_entropy(ds: &TrajectoryDataset, frames: &[usize], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("entropy threshold must be ≥ 0, got {threshold}")));
    }
    if frames.is_empty() || ds.num_frames() == 0 {
        return Err(Error::InsufficientData("entropy of an empty frame set".into()));
    }
    Ok(variable_entropies(ds, frames)
        .into_iter()
        .enumerate()
        .filter(|&(_, h)| h >= threshold)
        .map(|(v, _)| v)
        .collect())
}

/// Entropy in nats of every variable over `frames`.
pub fn variable_entropies(ds: &TrajectoryDataset, frames: &[usize]) -> Vec<f64> {
    (0..ds.num_variables())
        .map(|v| {
            let col: Vec<u8> = frames.iter().map(|&f| ds.labels(f)[v]).collect();
            entropy(&col)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 5000,
            val: 1000,
            test: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Test candidates dropped for being pixel-identical to a train frame.
    pub dedup_replacements: usize,
}

fn pixel_hash(pixels: &[u8]) -> [u8; 32] {
    Sha256::digest(pixels).into()
}

/// Random split of all frames. Test frames whose pixels equal some train
/// frame are skipped and the next candidate takes their place.
pub fn make_splits(ds: &TrajectoryDataset, sizes: SplitSizes, seed: u64) -> Result<ProbeSplit> {
    let n = ds.num_frames();
    let need = sizes.train + sizes.val + sizes.test;
    if need > n {
        return Err(Error::InsufficientData(format!("splits need {need} frames, dataset has {n}")));
    }
    if sizes.train == 0 || sizes.test == 0 {
        return Err(Error::Config("train and test splits must be non-empty".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = order[..sizes.train].to_vec();
    let val = order[sizes.train..sizes.train + sizes.val].to_vec();
    let seen: HashSet<[u8; 32]> = train.iter().map(|&f| pixel_hash(ds.pixels(f))).collect();
    let mut test = Vec::with_capacity(sizes.test);
    let mut dropped = 0;
    for &f in &order[sizes.train + sizes.val..] {
        if test.len() == sizes.test {
            break;
        }
        if seen.contains(&pixel_hash(ds.pixels(f))) {
            dropped += 1;
        } else {
            test.push(f);
        }
    }
    if test.len() < sizes.test {
        return Err(Error::InsufficientData(format!(
            "only {} test frames remain after removing {dropped} duplicates of train frames",
            test.len()
        )));
    }
    Ok(ProbeSplit {
        train,
        val,
        test,
        dedup_replacements: dropped,
    })
}
