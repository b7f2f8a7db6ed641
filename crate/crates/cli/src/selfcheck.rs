//! Built-in verification suites:
//!
//! 1. gradients: every tape op, then the encoder composed with each loss,
//!    against central differences in f64;
//! 2. loss oracles: every contrastive loss against flat scalar loops, plus
//!    the uniform and saturated anchors;
//! 3. metric oracles: F1 and accuracy against a brute-force confusion matrix;
//! 4. probing protocol: entropy pruning, train/test deduplication, and
//!    frozen encoders for every method that does not train through labels.
//!
//! A fault can be injected into the backward rule of one op family to show
//! that suite 1 catches it and names the op.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdim_core::autograd::{OpKind, Tape, Var};
use stdim_core::checkpoint::Checkpoint;
use stdim_core::encoder::EncoderConfig;
use stdim_core::envstream::{
    collect, Category, CollectConfig, ContrastiveBatch, Episode, PairOrigin, Provenance, SequenceBatch,
    SpriteWorldConfig, TrajectoryDataset, VariableSpec,
};
use stdim_core::gradcheck::{finite_diff_check, FdOptions, FdReport};
use stdim_core::objectives::{
    cpc_terms, global_t_dim_terms, infonce, jsd_grid, jsd_stdim_terms, static_dim_terms, stdim_terms, train_encoder,
    Batch, LabelSplit, MethodId, Model, ModelOptions, PairFeatures, TrainConfig, TrainData,
};
use stdim_core::params::Variable;
use stdim_core::probe::{
    encode_splits, make_splits, probe_variables, prune_low_entropy, scores, ProbeConfig, Scores, SplitSizes,
};
use stdim_core::tensor::Tensor;

/// Gradient checks pass below this relative error.
pub const GRAD_TOL: f64 = 1e-6;
/// Loss values must match their oracles to this absolute error.
pub const LOSS_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: u8,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Corrupt the backward rule of this op family on every suite-1 tape.
    pub inject_fault: Option<OpKind>,
    /// Suites to run; empty means all four.
    pub suites: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct Summary {
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn suite_passed(&self, suite: u8) -> bool {
        self.checks.iter().filter(|c| c.suite == suite).all(|c| c.passed) && self.checks.iter().any(|c| c.suite == suite)
    }

    /// Ops whose isolated gradient check failed. Op checks run with
    /// reducers first, so the first entry is the most likely culprit when a
    /// broken reducer drags later checks down with it.
    pub fn failing_ops(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .filter_map(|c| c.name.strip_prefix("grad/op/"))
            .map(str::to_string)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{} {:<w$}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let ops = self.failing_ops();
        if !ops.is_empty() {
            let _ = writeln!(s, "offending op: {} (failing op checks: {})", ops[0], ops.join(", "));
        }
        let _ = writeln!(
            s,
            "{} checks, {} failed, {:.1}s",
            self.checks.len(),
            failed,
            self.elapsed.as_secs_f64()
        );
        s
    }
}

pub fn run(opts: &Options) -> Summary {
    let t = Instant::now();
    let want = |k: u8| opts.suites.is_empty() || opts.suites.contains(&k);
    let mut checks = Vec::new();
    if want(1) {
        checks.extend(gradients(opts.inject_fault));
    }
    if want(2) {
        checks.extend(loss_oracles());
    }
    if want(3) {
        checks.extend(metric_oracles());
    }
    if want(4) {
        checks.extend(probe_protocol());
    }
    Summary {
        checks,
        elapsed: t.elapsed(),
    }
}

fn outcome(suite: u8, name: impl Into<String>, r: stdim_core::Result<(bool, String)>) -> Check {
    let name = name.into();
    match r {
        Ok((passed, detail)) => Check {
            suite,
            name,
            passed,
            detail,
        },
        Err(e) => Check {
            suite,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

// ---- suite 1: gradients ------------------------------------------------

type Graph = Box<dyn for<'t> Fn(&'t Tape<f64>, &Vec<Variable<f64>>) -> stdim_core::Result<Var<'t, f64>>>;

fn params(seed: u64, shapes: &[&[usize]]) -> Vec<Variable<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Variable::new(format!("p{i}"), Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0))))
        .collect()
}

/// `Σ c ⊙ y` with fixed, uneven weights so every output element matters
/// differently.
fn wsum<'t>(y: Var<'t, f64>) -> stdim_core::Result<Var<'t, f64>> {
    let c = Tensor::from_fn(&y.shape(), |k| ((k * 7919 + 3) % 17) as f64 / 8.0 - 1.0);
    Ok(y.mul(y.tape().constant(c))?.sum())
}

/// One small graph per op family. `sum` and `mul` come first since most
/// later graphs end in them.
fn op_graphs() -> Vec<(OpKind, Vec<Variable<f64>>, Graph)> {
    vec![
        (OpKind::Sum, params(1, &[&[3, 4]]), Box::new(|t, p| Ok(t.bind(&p[0]).sum()))),
        (OpKind::Mul, params(2, &[&[3, 4], &[3, 4]]), Box::new(|t, p| Ok(t.bind(&p[0]).mul(t.bind(&p[1]))?.sum()))),
        (OpKind::Mean, params(3, &[&[3, 4]]), Box::new(|t, p| Ok(t.bind(&p[0]).mean()))),
        (OpKind::Add, params(4, &[&[3, 4], &[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).add(t.bind(&p[1]))?))),
        (OpKind::Sub, params(5, &[&[3, 4], &[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).sub(t.bind(&p[1]))?))),
        (OpKind::Scale, params(6, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).scale(-1.7)))),
        (OpKind::AddScalar, params(7, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).add_scalar(0.3)))),
        (
            OpKind::AddRowBias,
            params(8, &[&[3, 4], &[4]]),
            Box::new(|t, p| wsum(t.bind(&p[0]).add_row_bias(t.bind(&p[1]))?)),
        ),
        (
            OpKind::MatMul,
            params(9, &[&[3, 4], &[4, 2], &[2, 4], &[3, 2]]),
            Box::new(|t, p| {
                let (a, b, c, d) = (t.bind(&p[0]), t.bind(&p[1]), t.bind(&p[2]), t.bind(&p[3]));
                let x = wsum(a.matmul(b)?)?;
                let y = wsum(a.matmul_nt(c)?)?;
                let z = wsum(a.matmul_tn(d)?)?;
                x.add(y)?.add(z)
            }),
        ),
        (
            OpKind::BatchedMatMul,
            params(10, &[&[2, 3, 4], &[2, 5, 4], &[3, 4]]),
            Box::new(|t, p| {
                let rhs = t.bind(&p[1]);
                let a = wsum(t.bind(&p[0]).batched_matmul_nt(rhs)?)?;
                let b = wsum(t.bind(&p[2]).batched_matmul_nt(rhs)?)?;
                a.add(b)
            }),
        ),
        (
            OpKind::Conv2d,
            params(11, &[&[2, 2, 7, 7], &[3, 2, 3, 3], &[3]]),
            Box::new(|t, p| wsum(t.bind(&p[0]).conv2d(t.bind(&p[1]), t.bind(&p[2]), 2)?)),
        ),
        (
            OpKind::ConvTranspose2d,
            params(12, &[&[2, 3, 3, 3], &[3, 2, 3, 3], &[2]]),
            Box::new(|t, p| wsum(t.bind(&p[0]).conv_transpose2d(t.bind(&p[1]), t.bind(&p[2]), 2, (7, 7))?)),
        ),
        (
            OpKind::LocationMajor,
            params(13, &[&[2, 3, 2, 2]]),
            Box::new(|t, p| wsum(t.bind(&p[0]).location_major()?)),
        ),
        (OpKind::Reshape, params(14, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).reshape(&[2, 6])?))),
        (OpKind::SliceOuter, params(15, &[&[4, 3]]), Box::new(|t, p| wsum(t.bind(&p[0]).slice_outer(1, 2)?))),
        (
            OpKind::GatherOuter,
            params(16, &[&[4, 3]]),
            Box::new(|t, p| wsum(t.bind(&p[0]).gather_outer(&[2, 0, 2, 3])?)),
        ),
        (
            OpKind::ConcatOuter,
            params(17, &[&[2, 3], &[3, 3]]),
            Box::new(|t, p| wsum(Var::concat_outer(&[t.bind(&p[0]), t.bind(&p[1])])?)),
        ),
        (OpKind::Relu, params(18, &[&[4, 5]]), Box::new(|t, p| wsum(t.bind(&p[0]).relu()))),
        (OpKind::Sigmoid, params(19, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).sigmoid()))),
        (OpKind::Tanh, params(20, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).tanh()))),
        (OpKind::Exp, params(21, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).exp()))),
        (OpKind::Square, params(22, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).square()))),
        (OpKind::Softplus, params(23, &[&[3, 4]]), Box::new(|t, p| wsum(t.bind(&p[0]).softplus()))),
        (
            OpKind::CrossEntropy,
            params(24, &[&[4, 5]]),
            Box::new(|t, p| t.bind(&p[0]).scale(2.0).cross_entropy(&[0, 3, 1, 4])),
        ),
    ]
}

fn fd_outcome(r: &FdReport) -> (bool, String) {
    (
        r.max_rel_error < GRAD_TOL && r.checked > 0,
        format!(
            "max rel err {:.2e} over {} coords (worst {}[{}]: analytic {:.6e} vs numeric {:.6e})",
            r.max_rel_error, r.checked, r.worst_param, r.worst_index, r.worst_analytic, r.worst_numeric
        ),
    )
}

fn frames(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 1, 16, 16], |_| rng.random_range(0.0..1.0))
}

/// A batch of `b` items of the kind `method` consumes, on 16×16 frames.
fn fd_batch(method: MethodId, b: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
    match method {
        MethodId::StaticDim => Batch::Static {
            anchors: frames(rng, b),
            foreign: frames(rng, b - 1),
        },
        MethodId::Vae => Batch::Frames {
            frames: frames(rng, b),
            labels: Vec::new(),
        },
        MethodId::Supervised => Batch::Frames {
            frames: frames(rng, b),
            labels: vec![(0..b).map(|i| 3 * i).collect(), (0..b).map(|i| 200 + i).collect()],
        },
        MethodId::Cpc => Batch::Sequences(SequenceBatch {
            frames: frames(rng, b * 4),
            batch: b,
            len: 4,
            starts: (0..b).collect(),
        }),
        _ => Batch::Pairs(ContrastiveBatch {
            anchors: frames(rng, b),
            positives: frames(rng, b),
            origins: (0..b)
                .map(|i| PairOrigin {
                    episode: 0,
                    t: i as u32,
                    frame: i,
                })
                .collect(),
        }),
    }
}

/// Methods with a trainable loss.
pub fn loss_methods() -> Vec<MethodId> {
    MethodId::ALL.into_iter().filter(|&m| m != MethodId::RandomCnn).collect()
}

/// Whole-encoder check of one loss: B = 3, 16×16 frames, f64.
pub fn loss_gradient(method: MethodId, fault: Option<OpKind>) -> stdim_core::Result<FdReport> {
    let options = ModelOptions {
        cpc_context: 2,
        cpc_horizons: 2,
        cpc_identity: false,
        probe_variables: vec!["a".into(), "b".into()],
    };
    let idx = MethodId::ALL.iter().position(|&m| m == method).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(idx);
    let mut model = Model::<f64>::new(method, EncoderConfig::tiny(8, 10 + idx), options)?;
    let batch = fd_batch(method, 3, &mut rng);
    finite_diff_check(
        &mut model,
        |tape, model: &Model<f64>| {
            tape.inject_fault(fault);
            let mut noise = ChaCha8Rng::seed_from_u64(99);
            Ok(model.loss(tape, &batch, &mut noise)?.total)
        },
        FdOptions {
            step: 1e-3,
            coords: 96,
            ..FdOptions::default()
        },
    )
}

pub fn gradients(fault: Option<OpKind>) -> Vec<Check> {
    let mut out = Vec::new();
    for (kind, mut p, graph) in op_graphs() {
        let r = finite_diff_check(
            &mut p,
            |tape, p: &Vec<Variable<f64>>| {
                tape.inject_fault(fault);
                graph(tape, p)
            },
            FdOptions {
                coords: 128,
                ..FdOptions::default()
            },
        );
        out.push(outcome(1, format!("grad/op/{kind}"), r.map(|r| fd_outcome(&r))));
    }
    for m in loss_methods() {
        let r = loss_gradient(m, fault).map(|r| {
            let (ok, detail) = fd_outcome(&r);
            (ok && r.checked >= 64, detail)
        });
        out.push(outcome(1, format!("grad/loss/{m}"), r));
    }
    out
}

// ---- suite 2: loss oracles ---------------------------------------------

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|s| (s - m).exp()).sum::<f64>().ln()
}

fn flat_ce(row: &[f64], target: usize) -> f64 {
    log_sum_exp(row) - row[target]
}

fn flat_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `aᵀ W b`, `W` row-major `[a.len(), b.len()]`.
fn flat_bilinear(a: &[f64], w: &Tensor<f64>, b: &[f64]) -> f64 {
    let n = b.len();
    let mut s = 0.0;
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            s += ai * w.data()[i * n + j] * bj;
        }
    }
    s
}

/// Vector at `[l, i, :]` of `[L, B, d]`.
fn at(x: &Tensor<f64>, l: usize, i: usize) -> &[f64] {
    let (b, d) = (x.dim(1), x.dim(2));
    &x.data()[(l * b + i) * d..(l * b + i + 1) * d]
}

fn flat_infonce(s: &[Vec<f64>]) -> f64 {
    s.iter().enumerate().map(|(i, r)| flat_ce(r, i)).sum::<f64>() / s.len() as f64
}

fn flat_jsd(s: &[Vec<f64>]) -> f64 {
    let b = s.len() as f64;
    let (mut pos, mut neg) = (0.0, 0.0);
    for (i, r) in s.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if i == j {
                pos += flat_softplus(-v);
            } else {
                neg += flat_softplus(v);
            }
        }
    }
    pos / b + neg / (b * (b - 1.0))
}

struct Pairs {
    g: Tensor<f64>,
    lt: Tensor<f64>,
    gn: Tensor<f64>,
    ln: Tensor<f64>,
    wg: Tensor<f64>,
    wl: Tensor<f64>,
}

impl Pairs {
    fn new(seed: u64, b: usize, l: usize, f: usize, d: usize) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Self {
            g: rand_tensor(&mut r, &[b, f], 1.0),
            lt: rand_tensor(&mut r, &[l, b, d], 1.0),
            gn: rand_tensor(&mut r, &[b, f], 1.0),
            ln: rand_tensor(&mut r, &[l, b, d], 1.0),
            wg: rand_tensor(&mut r, &[f, d], 1.0),
            wl: rand_tensor(&mut r, &[d, d], 1.0),
        }
    }

    fn features<'t>(&self, tape: &'t Tape<f64>) -> PairFeatures<'t, f64> {
        PairFeatures {
            global_t: tape.constant(self.g.clone()),
            local_t: tape.constant(self.lt.clone()),
            global_next: tape.constant(self.gn.clone()),
            local_next: tape.constant(self.ln.clone()),
        }
    }

    /// Summed-over-locations flat GL and LL losses under `per_location`.
    fn flat(&self, per_location: fn(&[Vec<f64>]) -> f64) -> (f64, f64) {
        let b = self.g.dim(0);
        let (mut gl, mut ll) = (0.0, 0.0);
        for l in 0..self.lt.dim(0) {
            let g: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| flat_bilinear(self.g.row(i), &self.wg, at(&self.ln, l, j))).collect())
                .collect();
            let lm: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| flat_bilinear(at(&self.lt, l, i), &self.wl, at(&self.ln, l, j))).collect())
                .collect();
            gl += per_location(&g);
            ll += per_location(&lm);
        }
        (gl, ll)
    }
}

fn close(got: f64, want: f64, tol: f64) -> (bool, String) {
    ((got - want).abs() <= tol, format!("{got:.9} vs {want:.9} (|Δ| {:.1e})", (got - want).abs()))
}

fn all_close(cases: Vec<(f64, f64)>, tol: f64) -> (bool, String) {
    let worst = cases
        .iter()
        .map(|(g, w)| (g - w).abs())
        .fold(0.0, f64::max);
    (worst <= tol && !cases.is_empty(), format!("{} cases, max |Δ| {worst:.1e}", cases.len()))
}

/// `(own, l)` case of the static objective: own frames `0..own`, foreign
/// frames `own..2·own−1`.
fn flat_static(global: &Tensor<f64>, local: &Tensor<f64>, own: usize, wg: &Tensor<f64>, wl: &Tensor<f64>) -> (f64, f64) {
    let (mut gl, mut ll) = (0.0, 0.0);
    for l in 0..local.dim(0) {
        let (mut gs, mut ls) = (0.0, 0.0);
        for i in 0..own {
            let cand: Vec<usize> = std::iter::once(i).chain(own..2 * own - 1).collect();
            let g: Vec<f64> = cand.iter().map(|&j| flat_bilinear(global.row(i), wg, at(local, l, j))).collect();
            let lo: Vec<f64> = cand.iter().map(|&j| flat_bilinear(at(local, l, i), wl, at(local, l, j))).collect();
            gs += flat_ce(&g, 0);
            ls += flat_ce(&lo, 0);
        }
        gl += gs / own as f64;
        ll += ls / own as f64;
    }
    (gl, ll)
}

pub fn loss_oracles() -> Vec<Check> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: stdim_core::Result<(bool, String)>| out.push(outcome(2, format!("loss/{name}"), r));

    push("infonce/oracle", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cases = Vec::new();
        for b in 2..=4 {
            let s = rand_tensor(&mut rng, &[b, b], 2.0);
            let rows: Vec<Vec<f64>> = (0..b).map(|i| s.row(i).to_vec()).collect();
            let tape = Tape::<f64>::new();
            cases.push((infonce(tape.constant(s))?.item()?, flat_infonce(&rows)));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    push("infonce/uniform-ln-b", (|| {
        let mut cases = Vec::new();
        for b in 2..=4 {
            let tape = Tape::<f64>::new();
            cases.push((infonce(tape.constant(Tensor::full(&[b, b], 0.37)))?.item()?, (b as f64).ln()));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    push("infonce/saturated", (|| {
        let tape = Tape::<f64>::new();
        let l = infonce(tape.constant(Tensor::eye(4).map(|x| 100.0 * x)))?.item()?;
        Ok((l < 1e-6, format!("{l:.3e}")))
    })());

    push("stdim/oracle", (|| {
        let mut cases = Vec::new();
        for (seed, b, l) in [(1, 2, 1), (2, 3, 2), (3, 4, 1), (4, 2, 2), (5, 4, 1)] {
            let fx = Pairs::new(seed, b, l, 3, 2);
            let tape = Tape::<f64>::new();
            let r = stdim_terms(&fx.features(&tape), tape.constant(fx.wg.clone()), tape.constant(fx.wl.clone()))?
                .report()?;
            let (gl, ll) = fx.flat(flat_infonce);
            cases.push((r.components["gl"], gl));
            cases.push((r.components["ll"], ll));
            cases.push((r.total, gl + ll));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    push("stdim/uniform-ln-b", (|| {
        // Identical local vectors per location make every score in a row equal.
        let (b, l) = (4, 1);
        let mut fx = Pairs::new(9, b, l, 3, 2);
        fx.ln = Tensor::from_fn(&[l, b, 2], |k| (k % 2) as f64 + 0.5);
        let tape = Tape::<f64>::new();
        let t = stdim_terms(&fx.features(&tape), tape.constant(fx.wg.clone()), tape.constant(fx.wl.clone()))?;
        Ok(close(t.total.item()?, 2.0 * (b as f64).ln(), LOSS_TOL))
    })());
    push("stdim/saturated", (|| {
        let b = 4;
        let e = Tensor::eye(b).map(|x| 30.0 * x);
        let tape = Tape::<f64>::new();
        let f = PairFeatures {
            global_t: tape.constant(e.clone()),
            local_t: tape.constant(e.clone().reshape(&[1, b, b])?),
            global_next: tape.constant(e.clone()),
            local_next: tape.constant(e.clone().reshape(&[1, b, b])?),
        };
        let l = stdim_terms(&f, tape.constant(Tensor::eye(b)), tape.constant(Tensor::eye(b)))?.total.item()?;
        Ok((l < 1e-6, format!("{l:.3e}")))
    })());

    push("jsd-stdim/oracle", (|| {
        let mut cases = Vec::new();
        for (seed, b, l) in [(11, 2, 1), (12, 3, 1), (13, 4, 1), (14, 2, 2)] {
            let fx = Pairs::new(seed, b, l, 2, 3);
            let tape = Tape::<f64>::new();
            let r = jsd_stdim_terms(&fx.features(&tape), tape.constant(fx.wg.clone()), tape.constant(fx.wl.clone()))?
                .report()?;
            let (gl, ll) = fx.flat(flat_jsd);
            cases.push((r.components["gl"], gl));
            cases.push((r.components["ll"], ll));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    push("jsd-stdim/zero-scores", (|| {
        let tape = Tape::<f64>::new();
        let (l, _) = jsd_grid(tape.constant(Tensor::zeros(&[1, 4, 4])))?;
        Ok(close(l.item()?, 2.0 * std::f64::consts::LN_2, LOSS_TOL))
    })());
    push("jsd-stdim/saturated", (|| {
        let tape = Tape::<f64>::new();
        let s = Tensor::from_fn(&[1, 4, 4], |k| if (k / 4) % 4 == k % 4 { 100.0 } else { -100.0 });
        let l = jsd_grid(tape.constant(s))?.0.item()?;
        Ok((l < 1e-6, format!("{l:.3e}")))
    })());

    push("global-t-dim/oracle", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut cases = Vec::new();
        for b in 2..=4 {
            let g = rand_tensor(&mut rng, &[b, 3], 1.0);
            let gn = rand_tensor(&mut rng, &[b, 3], 1.0);
            let w = rand_tensor(&mut rng, &[3, 3], 1.0);
            let s: Vec<Vec<f64>> = (0..b)
                .map(|i| (0..b).map(|j| flat_bilinear(g.row(i), &w, gn.row(j))).collect())
                .collect();
            let tape = Tape::<f64>::new();
            let got = global_t_dim_terms(tape.constant(g), tape.constant(w), tape.constant(gn))?.total.item()?;
            cases.push((got, flat_infonce(&s)));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    push("global-t-dim/uniform-ln-b", (|| {
        let b = 3;
        let tape = Tape::<f64>::new();
        let l = global_t_dim_terms(
            tape.constant(Tensor::full(&[b, 2], 0.5)),
            tape.constant(Tensor::full(&[2, 2], 1.0)),
            tape.constant(Tensor::full(&[b, 2], -0.25)),
        )?
        .total
        .item()?;
        Ok(close(l, (b as f64).ln(), LOSS_TOL))
    })());

    push("static-dim/oracle", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut cases = Vec::new();
        for (own, l) in [(2, 1), (3, 1), (2, 2)] {
            let n = 2 * own - 1;
            let global = rand_tensor(&mut rng, &[n, 3], 1.0);
            let local = rand_tensor(&mut rng, &[l, n, 2], 1.0);
            let wg = rand_tensor(&mut rng, &[3, 2], 1.0);
            let wl = rand_tensor(&mut rng, &[2, 2], 1.0);
            let (gl, ll) = flat_static(&global, &local, own, &wg, &wl);
            let tape = Tape::<f64>::new();
            let r = static_dim_terms(
                tape.constant(global),
                tape.constant(local),
                own,
                tape.constant(wg),
                tape.constant(wl),
            )?
            .report()?;
            cases.push((r.components["gl"], gl));
            cases.push((r.components["ll"], ll));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    push("static-dim/uniform-ln-b", (|| {
        let own = 4;
        let n = 2 * own - 1;
        let tape = Tape::<f64>::new();
        let r = static_dim_terms(
            tape.constant(Tensor::full(&[n, 3], 0.5)),
            tape.constant(Tensor::full(&[1, n, 2], 0.25)),
            own,
            tape.constant(Tensor::full(&[3, 2], 1.0)),
            tape.constant(Tensor::full(&[2, 2], 1.0)),
        )?
        .report()?;
        let ln = (own as f64).ln();
        Ok(all_close(vec![(r.components["gl"], ln), (r.components["ll"], ln)], LOSS_TOL))
    })());
    push("static-dim/saturated", (|| {
        let own = 3;
        let n = 2 * own - 1;
        let global = Tensor::from_fn(&[n, n], |k| if k / n == k % n && k / n < own { 30.0 } else { 0.0 });
        let local = Tensor::from_fn(&[1, n, n], |k| if k / n == k % n { 30.0 } else { 0.0 });
        let tape = Tape::<f64>::new();
        let l = static_dim_terms(
            tape.constant(global),
            tape.constant(local),
            own,
            tape.constant(Tensor::eye(n)),
            tape.constant(Tensor::eye(n)),
        )?
        .total
        .item()?;
        Ok((l < 1e-6, format!("{l:.3e}")))
    })());

    push("cpc/oracle", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut cases = Vec::new();
        for (b, len, k, context) in [(2, 3, 1, 1), (3, 6, 2, 2), (4, 7, 3, 3)] {
            let zs: Vec<Tensor<f64>> = (0..len).map(|_| rand_tensor(&mut rng, &[b, 3], 1.0)).collect();
            let cs: Vec<Tensor<f64>> = (0..len).map(|_| rand_tensor(&mut rng, &[b, 2], 1.0)).collect();
            let ws: Vec<Tensor<f64>> = (0..k).map(|_| rand_tensor(&mut rng, &[2, 3], 1.0)).collect();
            let per_k: Vec<f64> = ws
                .iter()
                .enumerate()
                .map(|(h, w)| {
                    let ts: Vec<usize> = (context - 1..=len - 1 - k).collect();
                    ts.iter()
                        .map(|&t| {
                            let s: Vec<Vec<f64>> = (0..b)
                                .map(|i| {
                                    (0..b).map(|j| flat_bilinear(cs[t].row(i), w, zs[t + h + 1].row(j))).collect()
                                })
                                .collect();
                            flat_infonce(&s)
                        })
                        .sum::<f64>()
                        / ts.len() as f64
                })
                .collect();
            let tape = Tape::<f64>::new();
            let zv: Vec<Var<f64>> = zs.iter().map(|z| tape.constant(z.clone())).collect();
            let cv: Vec<Var<f64>> = cs.iter().map(|c| tape.constant(c.clone())).collect();
            let wv: Vec<Var<f64>> = ws.iter().map(|w| tape.constant(w.clone())).collect();
            let r = cpc_terms(&cv, &zv, &wv, context)?.report()?;
            for (h, want) in per_k.iter().enumerate() {
                cases.push((r.components[&format!("k{}", h + 1)], *want));
            }
            cases.push((r.total, per_k.iter().sum::<f64>() / k as f64));
        }
        Ok(all_close(cases, LOSS_TOL))
    })());
    out
}

// ---- suite 3: metric oracles -------------------------------------------

/// Support-weighted and macro F1 plus accuracy from an explicit confusion
/// matrix.
pub fn confusion_oracle(preds: &[u8], labels: &[u8]) -> Scores {
    let mut m: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    for (&p, &y) in preds.iter().zip(labels) {
        *m.entry((y, p)).or_default() += 1;
    }
    let classes: Vec<u8> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = labels.len() as f64;
    let (mut weighted, mut sum) = (0.0, 0.0);
    for &c in &classes {
        let tp = m.get(&(c, c)).copied().unwrap_or(0);
        let col: u64 = m.iter().filter(|((_, p), _)| *p == c).map(|(_, v)| v).sum();
        let row: u64 = m.iter().filter(|((y, _), _)| *y == c).map(|(_, v)| v).sum();
        let f = if tp == 0 {
            0.0
        } else {
            let (p, r) = (tp as f64 / col as f64, tp as f64 / row as f64);
            2.0 * p * r / (p + r)
        };
        weighted += f * row as f64 / n;
        sum += f;
    }
    let correct: u64 = m.iter().filter(|((y, p), _)| y == p).map(|(_, v)| v).sum();
    Scores {
        f1: weighted,
        f1_macro: sum / classes.len() as f64,
        accuracy: correct as f64 / n,
    }
}

pub fn metric_oracles() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(outcome(3, "metric/confusion-oracle", (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mismatches = 0;
        for _ in 0..1000 {
            let n = rng.random_range(1..200);
            let k = rng.random_range(1..=256u32);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
            let preds: Vec<u8> = labels
                .iter()
                .map(|&y| if rng.random_bool(0.5) { y } else { rng.random_range(0..k) as u8 })
                .collect();
            if scores(&preds, &labels)? != confusion_oracle(&preds, &labels) {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("1000 random vectors, {mismatches} inexact")))
    })()));
    out.push(outcome(3, "metric/worked-example", (|| {
        let s = scores(&[0, 0, 0, 0], &[0, 0, 1, 1])?;
        let (ok, detail) = close(s.f1, 1.0 / 3.0, 1e-12);
        Ok((ok && s.accuracy == 0.5, format!("f1 {detail}, accuracy {}", s.accuracy)))
    })()));
    out
}

// ---- suite 4: probing protocol -----------------------------------------

fn fixture(n: usize, vars: Vec<VariableSpec>, pixel: impl Fn(usize) -> [u8; 4], labels: impl Fn(usize) -> Vec<u8>) -> stdim_core::Result<TrajectoryDataset> {
    let ep = Episode {
        id: 0,
        timesteps: (0..n as u32).collect(),
        pixels: (0..n).flat_map(&pixel).collect(),
        labels: (0..n).flat_map(&labels).collect(),
    };
    let prov = Provenance {
        policy: "fixture".into(),
        epsilon: 0.0,
        seed: 0,
        workers: 1,
    };
    TrajectoryDataset::new("fixture", 2, 2, vars, prov, vec![ep])
}

fn distinct(i: usize) -> [u8; 4] {
    [(i & 255) as u8, (i >> 8) as u8, 7, 9]
}

/// Brief training then probing of every method that keeps its encoder
/// frozen during probing; checkpoint bytes are compared around the probe.
pub fn frozen_encoder(method: MethodId) -> stdim_core::Result<(bool, String)> {
    let env = SpriteWorldConfig::default();
    let ds = collect(&CollectConfig {
        env: env.clone(),
        workers: 2,
        frames_per_worker: 200,
        ..CollectConfig::default()
    })?;
    let foreign = collect(&CollectConfig {
        env: SpriteWorldConfig::foreign(),
        workers: 1,
        frames_per_worker: 40,
        ..CollectConfig::default()
    })?;
    let split = make_splits(&ds, SplitSizes { train: 200, val: 50, test: 100 }, 0)?;
    let retained = prune_low_entropy(&ds, &split.train, 0.6)?;
    let cfg = TrainConfig {
        method,
        encoder: EncoderConfig {
            feature_dim: 32,
            ..EncoderConfig::default()
        },
        options: ModelOptions {
            cpc_context: 3,
            cpc_horizons: 2,
            ..ModelOptions::default()
        },
        steps: 2,
        batch_size: 8,
        sequence_batch: 2,
        sequence_len: 6,
        eval_every: 1,
        log_every: 1,
        ..TrainConfig::default()
    };
    let labels = LabelSplit {
        train: split.train.clone(),
        val: split.val.clone(),
        variables: retained.clone(),
    };
    let trained = train_encoder(
        &cfg,
        TrainData {
            dataset: &ds,
            foreign: Some(&foreign),
            labels: Some(&labels),
        },
    )?;
    let enc = &trained.model.encoder;
    let before = Checkpoint::from_model("", enc).to_bytes();
    let feats = encode_splits(enc, &ds, &split)?;
    probe_variables(
        &ds,
        &split,
        &feats,
        &retained,
        &ProbeConfig {
            max_steps: 50,
            eval_every: 25,
            ..ProbeConfig::default()
        },
    )?;
    let after = Checkpoint::from_model("", enc).to_bytes();
    Ok((before == after, format!("{} checkpoint bytes {}", before.len(), if before == after { "unchanged" } else { "CHANGED" })))
}

pub fn probe_protocol() -> Vec<Check> {
    let mut out = Vec::new();
    out.push(outcome(4, "probe/entropy-pruning", (|| {
        let vars = vec![
            VariableSpec::new("constant", Category::Misc, 0, 255),
            VariableSpec::new("binary", Category::Misc, 0, 255),
            VariableSpec::new("skewed", Category::Misc, 0, 255),
        ];
        let ds = fixture(100, vars, distinct, |i| vec![3, (i % 2) as u8, u8::from(i % 10 == 0)])?;
        let all: Vec<usize> = (0..100).collect();
        let kept = prune_low_entropy(&ds, &all, 0.6)?;
        Ok((kept == vec![1], format!("retained {kept:?} of [constant, binary, skewed]")))
    })()));
    out.push(outcome(4, "probe/dedup", (|| {
        let sz = SplitSizes { train: 200, val: 50, test: 100 };
        let clean = fixture(400, vec![], distinct, |_| vec![])?;
        let base = make_splits(&clean, sz, 9)?;
        let k = 17;
        let planted = fixture(
            400,
            vec![],
            |i| match base.test[..k].iter().position(|&t| t == i) {
                Some(j) => distinct(base.train[j]),
                None => distinct(i),
            },
            |_| vec![],
        )?;
        let s = make_splits(&planted, sz, 9)?;
        let train: HashSet<&[u8]> = s.train.iter().map(|&f| planted.pixels(f)).collect();
        let dups = s.test.iter().filter(|&&f| train.contains(planted.pixels(f))).count();
        Ok((
            dups == 0 && s.dedup_replacements == k,
            format!("{k} planted, {} replaced, {dups} cross-duplicates left", s.dedup_replacements),
        ))
    })()));
    for m in MethodId::ALL.into_iter().filter(|m| !m.uses_labels()) {
        out.push(outcome(4, format!("probe/frozen-encoder/{m}"), frozen_encoder(m)));
    }
    out
}
