//! Classification metrics over byte-valued labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three numbers reported for every probe.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// Support-weighted mean of per-class F1 over classes present in the labels.
    pub f1: f64,
    /// Unweighted mean of per-class F1 over the same classes.
    pub f1_macro: f64,
    pub accuracy: f64,
}

/// Per-class `(true positives, predicted count, true count)`.
fn counts(preds: &[u8], labels: &[u8]) -> Result<[(u64, u64, u64); 256]> {
    if preds.len() != labels.len() {
        return Err(Error::dim("metrics", "samples", labels.len(), preds.len()));
    }
    if labels.is_empty() {
        return Err(Error::InsufficientData("metrics need at least one sample".into()));
    }
    let mut c = [(0u64, 0u64, 0u64); 256];
    for (&p, &y) in preds.iter().zip(labels) {
        c[p as usize].1 += 1;
        c[y as usize].2 += 1;
        if p == y {
            c[y as usize].0 += 1;
        }
    }
    Ok(c)
}

fn class_f1(tp: u64, predicted: u64, actual: u64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / actual as f64;
    2.0 * p * r / (p + r)
}

/// Support-weighted F1.
pub fn f1_score(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(scores(preds, labels)?.f1)
}

/// Unweighted mean of per-class F1.
pub fn f1_macro(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(scores(preds, labels)?.f1_macro)
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    Ok(scores(preds, labels)?.accuracy)
}

pub fn scores(preds: &[u8], labels: &[u8]) -> Result<Scores> {
    let c = counts(preds, labels)?;
    let n = labels.len() as f64;
    let (mut weighted, mut sum, mut present, mut correct) = (0.0, 0.0, 0usize, 0u64);
    for &(tp, predicted, actual) in &c {
        correct += tp;
        if actual == 0 {
            continue;
        }
        let f = class_f1(tp, predicted, actual);
        weighted += f * actual as f64 / n;
        sum += f;
        present += 1;
    }
    Ok(Scores {
        f1: weighted,
        f1_macro: sum / present as f64,
        accuracy: correct as f64 / n,
    })
}

/// Most frequent value; ties go to the smallest.
pub fn mode(labels: &[u8]) -> Result<u8> {
    if labels.is_empty() {
        return Err(Error::InsufficientData("mode of an empty label set".into()));
    }
    let mut hist = [0usize; 256];
    for &y in labels {
        hist[y as usize] += 1;
    }
    let best = hist.iter().max().copied().unwrap_or(0);
    Ok(hist.iter().position(|&h| h == best).unwrap_or(0) as u8)
}

/// Scores of always predicting the train-set mode.
pub fn maj_clf_baseline(train: &[u8], test: &[u8]) -> Result<Scores> {
    let m = mode(train)?;
    scores(&vec![m; test.len()], test)
}

/// Shannon entropy in nats of the empirical distribution.
pub fn entropy(values: &[u8]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let n = values.len() as f64;
    hist.iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let p = h as f64 / n;
            -p * p.ln()
        })
        .sum()
}
