//! Central-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Parameterized;

#[derive(Clone, Copy, Debug)]
pub struct FdOptions {
    pub step: f64,
    /// Coordinates compared (all of them when fewer exist).
    pub coords: usize,
    /// Denominator floor of the relative error, in units of `max(1, |loss|)`.
    /// Central differences cannot resolve gradients much below
    /// `ε·|loss| / step`, so tiny coordinates are compared on the loss scale.
    pub floor: f64,
    pub seed: u64,
    /// Re-draw coordinates whose ±step probe flips any relu.
    pub avoid_kinks: bool,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            coords: 64,
            floor: 1e-6,
            seed: 0,
            avoid_kinks: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub skipped_kinks: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of `loss` with fourth-order central
/// differences `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h` on a random
/// subsample of trainable coordinates and returns the worst relative error.
/// `loss` must build a scalar on the tape it is given; it is called once for
/// the analytic pass and four times per probed coordinate.
pub fn finite_diff_check<M, F>(model: &mut M, loss: F, opts: FdOptions) -> Result<FdReport>
where
    M: Parameterized<f64> + ?Sized,
    F: for<'t> Fn(&'t Tape<f64>, &M) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let l = loss(&tape, model)?;
        if !l.value().is_scalar() {
            return Err(Error::Contract(format!(
                "finite_diff_check needs a scalar function, got shape {:?}",
                l.shape()
            )));
        }
        (tape.backward(l)?, l.item()?)
    };
    let (analytic, f0) = analytic;
    let floor = opts.floor * f0.abs().max(1.0);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (pi, p) in model.params().iter().enumerate() {
        if p.trainable() {
            coords.extend((0..p.value().numel()).map(|i| (pi, i)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    coords.shuffle(&mut rng);

    let eval = |model: &M| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let l = loss(&tape, model)?;
        Ok((l.item()?, tape.activation_pattern()))
    };

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (pi, idx) in coords {
        if report.checked >= opts.coords {
            break;
        }
        let (name, a) = {
            let p = model.params()[pi];
            let a = analytic.get(p).map_or(0.0, |g| g.data()[idx]);
            (p.name().to_string(), a)
        };
        let orig = model.params()[pi].value().data()[idx];
        let mut probe = |offset: f64| {
            model.params_mut()[pi].value_mut()[idx] = orig + offset;
            eval(model)
        };
        let evals = [
            probe(2.0 * opts.step),
            probe(opts.step),
            probe(-opts.step),
            probe(-2.0 * opts.step),
        ];
        model.params_mut()[pi].value_mut()[idx] = orig;
        let mut f = [0.0; 4];
        let mut patterns = [0u64; 4];
        for (k, e) in evals.into_iter().enumerate() {
            (f[k], patterns[k]) = e?;
        }
        if opts.avoid_kinks && patterns.iter().any(|&p| p != patterns[0]) {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (-f[0] + 8.0 * f[1] - 8.0 * f[2] + f[3]) / (12.0 * opts.step);
        let err = relative_error(a, numeric, floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_param = name;
            report.worst_index = idx;
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
