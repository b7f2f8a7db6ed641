//! Loss functions over features already on a tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A loss under construction: the differentiable total plus named parts.
#[derive(Clone, Debug)]
pub struct LossTerms<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub components: Vec<(String, Var<'t, T>)>,
    /// Fraction of rows whose positive outscored every negative.
    pub accuracy: Option<f64>,
}

impl<'t, T: Scalar> LossTerms<'t, T> {
    /// Total defined as the plain sum of the components.
    pub fn summed(components: Vec<(String, Var<'t, T>)>, accuracy: Option<f64>) -> Result<Self> {
        let mut it = components.iter();
        let first = it.next().ok_or_else(|| Error::Contract("a loss needs at least one component".into()))?;
        let mut total = first.1;
        for (_, v) in it {
            total = total.add(*v)?;
        }
        Ok(Self {
            total,
            components,
            accuracy,
        })
    }

    pub fn report(&self) -> Result<LossReport> {
        let mut components = BTreeMap::new();
        for (name, v) in &self.components {
            components.insert(name.clone(), v.item()?.as_f64());
        }
        Ok(LossReport {
            total: self.total.item()?.as_f64(),
            components,
            accuracy: self.accuracy,
        })
    }
}

/// Plain-number summary of one loss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
}

/// Row-wise hit count: the target column strictly beats every other live column.
pub(crate) fn hits<T: Scalar>(scores: &Tensor<T>, targets: &[usize], mask: Option<&[bool]>) -> usize {
    let k = *scores.shape().last().expect("scores are at least 1-D");
    scores
        .data()
        .chunks_exact(k)
        .enumerate()
        .filter(|(r, row)| {
            let t = targets[*r];
            (0..k).all(|j| j == t || mask.is_some_and(|m| !m[r * k + j]) || row[j] < row[t])
        })
        .count()
}

/// InfoNCE over a `B×B` score matrix whose diagonal holds the positives:
/// mean over rows of `-log softmax(row)[i]`.
pub fn infonce<'t, T: Scalar>(scores: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::shape("infonce", format!("scores must be square, got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::Contract(format!("infonce needs at least 2 candidates, got {}", s[0])));
    }
    let targets: Vec<usize> = (0..s[0]).collect();
    scores.cross_entropy(&targets)
}

/// Sum over the leading axis of row-mean InfoNCE. `scores` is `[L, B, C]`;
/// row `i` of every slice has its positive in column `targets[i]`.
/// Returns the loss and the contrastive accuracy over all `L·B` rows.
pub fn infonce_grid<'t, T: Scalar>(
    scores: Var<'t, T>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(Var<'t, T>, f64)> {
    let s = scores.shape();
    if s.len() != 3 {
        return Err(Error::shape("infonce_grid", format!("scores must be 3-D, got {s:?}")));
    }
    let (l, b, c) = (s[0], s[1], s[2]);
    if targets.len() != b {
        return Err(Error::dim("infonce_grid", "rows", b, targets.len()));
    }
    let live = match mask {
        Some(m) => {
            if m.len() != b * c {
                return Err(Error::dim("infonce_grid", "mask", b * c, m.len()));
            }
            m.chunks_exact(c).map(|r| r.iter().filter(|&&x| x).count()).min().unwrap_or(0)
        }
        None => c,
    };
    if live < 2 {
        return Err(Error::Contract(format!("infonce needs at least 2 candidates, got {live}")));
    }
    let all_targets: Vec<usize> = (0..l).flat_map(|_| targets.iter().copied()).collect();
    let all_mask: Option<Vec<bool>> = mask.map(|m| (0..l).flat_map(|_| m.iter().copied()).collect());
    let loss = scores.masked_cross_entropy(&all_targets, all_mask.as_deref())?.scale(l as f64);
    let acc = hits(&scores.value(), &all_targets, all_mask.as_deref()) as f64 / (l * b) as f64;
    Ok((loss, acc))
}

/// Binary (softplus) discrimination over `[L, B, B]` scores with positives on
/// each slice's diagonal: per slice, mean softplus(−s) over positives plus
/// mean softplus(s) over negatives; slices are summed.
pub fn jsd_grid<'t, T: Scalar>(scores: Var<'t, T>) -> Result<(Var<'t, T>, f64)> {
    let s = scores.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(Error::shape("jsd", format!("scores must be [L, B, B], got {s:?}")));
    }
    let (l, b) = (s[0], s[1]);
    if b < 2 {
        return Err(Error::Contract(format!("jsd needs at least 2 candidates, got {b}")));
    }
    let tape = scores.tape();
    let (pos_w, neg_w) = (1.0 / b as f64, 1.0 / (b * (b - 1)) as f64);
    let sign = Tensor::from_fn(&[l, b, b], |i| {
        let (r, c) = ((i / b) % b, i % b);
        T::of(if r == c { -1.0 } else { 1.0 })
    });
    let weight = Tensor::from_fn(&[l, b, b], |i| {
        let (r, c) = ((i / b) % b, i % b);
        T::of(if r == c { pos_w } else { neg_w })
    });
    let loss = scores
        .mul(tape.constant(sign))?
        .softplus()
        .mul(tape.constant(weight))?
        .sum();
    let targets: Vec<usize> = (0..l).flat_map(|_| 0..b).collect();
    let acc = hits(&scores.value(), &targets, None) as f64 / (l * b) as f64;
    Ok((loss, acc))
}

/// Rows `start..start+len` of the middle axis of `[L, N, d]`.
pub(crate) fn middle_slice<'t, T: Scalar>(x: Var<'t, T>, start: usize, len: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (l, n, d) = (s[0], s[1], s[2]);
    if start + len > n {
        return Err(Error::Index {
            op: "middle_slice",
            index: start + len,
            bound: n,
        });
    }
    let rows: Vec<usize> = (0..l).flat_map(|p| (start..start + len).map(move |i| p * n + i)).collect();
    x.reshape(&[l * n, d])?.gather_outer(&rows)?.reshape(&[l, len, d])
}

/// `x[L, B, d] · W[d, e] -> [L, B, e]`
fn per_location_matmul<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    let e = *w.shape().last().expect("weights are 2-D");
    x.reshape(&[s[0] * s[1], s[2]])?.matmul(w)?.reshape(&[s[0], s[1], e])
}

/// Global-local scores `g[l, i, j] = φ(x_i)ᵀ W_g φ_l(y_j)`.
pub fn global_local_scores<'t, T: Scalar>(
    global: Var<'t, T>,
    w_g: Var<'t, T>,
    local: Var<'t, T>,
) -> Result<Var<'t, T>> {
    check_local("global_local", &local)?;
    global.matmul(w_g)?.batched_matmul_nt(local)
}

/// Local-local scores `f[l, i, j] = φ_l(x_i)ᵀ W_l φ_l(y_j)`.
pub fn local_local_scores<'t, T: Scalar>(
    local_a: Var<'t, T>,
    w_l: Var<'t, T>,
    local_b: Var<'t, T>,
) -> Result<Var<'t, T>> {
    check_local("local_local", &local_a)?;
    check_local("local_local", &local_b)?;
    if local_a.shape()[0] != local_b.shape()[0] {
        return Err(Error::dim("local_local", "locations", local_a.shape()[0], local_b.shape()[0]));
    }
    per_location_matmul(local_a, w_l)?.batched_matmul_nt(local_b)
}

fn check_local<T: Scalar>(op: &'static str, x: &Var<'_, T>) -> Result<()> {
    if x.shape().len() != 3 {
        return Err(Error::shape(op, format!("local features must be [L, B, d], got {:?}", x.shape())));
    }
    Ok(())
}

/// Features of a batch of consecutive pairs.
#[derive(Clone, Copy, Debug)]
pub struct PairFeatures<'t, T: Scalar> {
    /// `[B, F]`
    pub global_t: Var<'t, T>,
    /// `[L, B, d]`
    pub local_t: Var<'t, T>,
    /// `[B, F]`
    pub global_next: Var<'t, T>,
    /// `[L, B, d]`
    pub local_next: Var<'t, T>,
}

/// GL + LL InfoNCE, each summed over locations.
pub fn stdim_terms<'t, T: Scalar>(
    f: &PairFeatures<'t, T>,
    w_g: Var<'t, T>,
    w_l: Var<'t, T>,
) -> Result<LossTerms<'t, T>> {
    let b = f.global_t.shape()[0];
    let targets: Vec<usize> = (0..b).collect();
    let (gl, acc_g) = infonce_grid(global_local_scores(f.global_t, w_g, f.local_next)?, &targets, None)?;
    let (ll, acc_l) = infonce_grid(local_local_scores(f.local_t, w_l, f.local_next)?, &targets, None)?;
    LossTerms::summed(
        vec![("gl".into(), gl), ("ll".into(), ll)],
        Some(0.5 * (acc_g + acc_l)),
    )
}

/// Same pairs and critics as [`stdim_terms`], scored by binary discrimination.
pub fn jsd_stdim_terms<'t, T: Scalar>(
    f: &PairFeatures<'t, T>,
    w_g: Var<'t, T>,
    w_l: Var<'t, T>,
) -> Result<LossTerms<'t, T>> {
    let (gl, acc_g) = jsd_grid(global_local_scores(f.global_t, w_g, f.local_next)?)?;
    let (ll, acc_l) = jsd_grid(local_local_scores(f.local_t, w_l, f.local_next)?)?;
    LossTerms::summed(
        vec![("gl".into(), gl), ("ll".into(), ll)],
        Some(0.5 * (acc_g + acc_l)),
    )
}

/// InfoNCE over global-global scores `φ(x_i)ᵀ W φ(y_j)`.
pub fn global_t_dim_terms<'t, T: Scalar>(
    global_t: Var<'t, T>,
    w: Var<'t, T>,
    global_next: Var<'t, T>,
) -> Result<LossTerms<'t, T>> {
    let scores = global_t.bilinear(w, global_next)?;
    let b = scores.shape()[0];
    let loss = infonce(scores)?;
    let acc = hits(&scores.value(), &(0..b).collect::<Vec<_>>(), None) as f64 / b as f64;
    LossTerms::summed(vec![("global".into(), loss)], Some(acc))
}

/// Same-frame global-local and local-local InfoNCE. `global` / `local` hold
/// `B` own frames followed by at least `B − 1` foreign frames; row `i`
/// competes its own frame against the first `B − 1` foreign ones.
pub fn static_dim_terms<'t, T: Scalar>(
    global: Var<'t, T>,
    local: Var<'t, T>,
    own: usize,
    w_g: Var<'t, T>,
    w_l: Var<'t, T>,
) -> Result<LossTerms<'t, T>> {
    check_local("static_dim", &local)?;
    let n = local.shape()[1];
    if own < 2 || n < 2 * own - 1 {
        return Err(Error::InsufficientData(format!(
            "static-dim needs {} foreign frames for a batch of {own}, got {}",
            own.saturating_sub(1),
            n.saturating_sub(own)
        )));
    }
    let c = 2 * own - 1;
    let candidates = middle_slice(local, 0, c)?;
    let own_global = global.slice_outer(0, own)?;
    let own_local = middle_slice(local, 0, own)?;
    let mask: Vec<bool> = (0..own)
        .flat_map(|i| (0..c).map(move |j| j == i || j >= own))
        .collect();
    let targets: Vec<usize> = (0..own).collect();
    let (gl, acc_g) = infonce_grid(
        global_local_scores(own_global, w_g, candidates)?,
        &targets,
        Some(&mask),
    )?;
    let (ll, acc_l) = infonce_grid(
        local_local_scores(own_local, w_l, candidates)?,
        &targets,
        Some(&mask),
    )?;
    LossTerms::summed(
        vec![("gl".into(), gl), ("ll".into(), ll)],
        Some(0.5 * (acc_g + acc_l)),
    )
}

/// `KL(N(μ, e^{logvar}) ‖ N(0, I))`, summed over latents, mean over the batch.
pub fn gaussian_kl<'t, T: Scalar>(mu: Var<'t, T>, logvar: Var<'t, T>) -> Result<Var<'t, T>> {
    let b = mu.shape()[0];
    Ok(mu
        .square()
        .add(logvar.exp())?
        .sub(logvar)?
        .add_scalar(-1.0)
        .sum()
        .scale(0.5 / b as f64))
}

/// Squared error summed over pixels, mean over the batch.
pub fn summed_squared_error<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "reconstruction",
            format!("decoder produced {:?} for targets {:?}", pred.shape(), target.shape()),
        ));
    }
    let b = pred.shape()[0];
    Ok(pred.sub(target)?.square().sum().scale(1.0 / b as f64))
}

/// Per-element mean squared error.
pub fn mean_squared_error<'t, T: Scalar>(pred: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "prediction",
            format!("decoder produced {:?} for targets {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(pred.sub(target)?.square().mean())
}

/// Sum of per-variable 256-way cross-entropies. `logits[v]` is `[B, 256]`.
pub fn supervised_terms<'t, T: Scalar>(
    logits: &[(String, Var<'t, T>)],
    labels: &[Vec<usize>],
) -> Result<LossTerms<'t, T>> {
    if logits.len() != labels.len() {
        return Err(Error::dim("supervised", "variables", logits.len(), labels.len()));
    }
    let mut comps = Vec::with_capacity(logits.len());
    for ((name, l), y) in logits.iter().zip(labels) {
        comps.push((name.clone(), l.cross_entropy(y)?));
    }
    LossTerms::summed(comps, None)
}

