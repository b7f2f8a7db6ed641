use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdim_core::autograd::{Tape, Var};
use stdim_core::checkpoint::Checkpoint;
use stdim_core::encoder::{ConvSpec, EncoderConfig};
use stdim_core::envstream::*;
use stdim_core::error::Error;
use stdim_core::objectives::*;
use stdim_core::params::Parameterized;
use stdim_core::tensor::Tensor;

const LN2: f64 = std::f64::consts::LN_2;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-log softmax(row)[target]`
fn ce(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|s| (s - m).exp()).sum::<f64>().ln() - row[target]
}

/// `aᵀ W b` with `W` stored row-major `[a.len(), b.len()]`.
fn bil(a: &[f64], w: &Tensor<f64>, b: &[f64]) -> f64 {
    let n = b.len();
    let mut s = 0.0;
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            s += ai * w.data()[i * n + j] * bj;
        }
    }
    s
}

/// Vector at `[l, i, :]` of a `[L, B, d]` tensor.
fn loc(x: &Tensor<f64>, l: usize, i: usize) -> &[f64] {
    let (b, d) = (x.dim(1), x.dim(2));
    &x.data()[(l * b + i) * d..(l * b + i + 1) * d]
}

fn oracle_infonce(s: &[Vec<f64>]) -> f64 {
    s.iter().enumerate().map(|(i, r)| ce(r, i)).sum::<f64>() / s.len() as f64
}

fn oracle_jsd(s: &[Vec<f64>]) -> f64 {
    let b = s.len() as f64;
    let mut pos = 0.0;
    let mut neg = 0.0;
    for (i, r) in s.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if i == j {
                pos += softplus(-v);
            } else {
                neg += softplus(v);
            }
        }
    }
    pos / b + neg / (b * (b - 1.0))
}

struct PairFixture {
    g: Tensor<f64>,
    lt: Tensor<f64>,
    gn: Tensor<f64>,
    ln: Tensor<f64>,
    wg: Tensor<f64>,
    wl: Tensor<f64>,
}

impl PairFixture {
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

    fn b(&self) -> usize {
        self.g.dim(0)
    }

    fn l(&self) -> usize {
        self.lt.dim(0)
    }

    /// Per-location GL and LL score matrices.
    fn scores(&self) -> Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let b = self.b();
        (0..self.l())
            .map(|l| {
                let gl = (0..b)
                    .map(|i| (0..b).map(|j| bil(self.g.row(i), &self.wg, loc(&self.ln, l, j))).collect())
                    .collect();
                let ll = (0..b)
                    .map(|i| (0..b).map(|j| bil(loc(&self.lt, l, i), &self.wl, loc(&self.ln, l, j))).collect())
                    .collect();
                (gl, ll)
            })
            .collect()
    }
}

#[test]
fn infonce_identity_two_by_two() {
    let tape = Tape::<f64>::new();
    let l = infonce(tape.constant(Tensor::eye(2))).unwrap().item().unwrap();
    assert_abs_diff_eq!(l, 0.313262, epsilon = 1e-6);
    assert_abs_diff_eq!(l, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
}

#[test]
fn infonce_uniform_scores_give_ln_b() {
    for b in [2, 3, 8] {
        let tape = Tape::<f64>::new();
        let l = infonce(tape.constant(Tensor::full(&[b, b], 0.37))).unwrap().item().unwrap();
        assert_abs_diff_eq!(l, (b as f64).ln(), epsilon = 1e-6);
    }
    let tape = Tape::<f64>::new();
    let l = infonce(tape.constant(Tensor::zeros(&[8, 8]))).unwrap().item().unwrap();
    assert_abs_diff_eq!(l, 2.0794, epsilon = 1e-4);
}

#[test]
fn infonce_saturated_positives_vanish() {
    let tape = Tape::<f64>::new();
    let s = Tensor::eye(5).map(|x| 100.0 * x);
    assert!(infonce(tape.constant(s)).unwrap().item().unwrap() < 1e-6);
}

#[test]
fn infonce_rejects_single_candidate_and_non_square() {
    let tape = Tape::<f64>::new();
    assert!(matches!(infonce(tape.constant(Tensor::zeros(&[1, 1]))), Err(Error::Contract(_))));
    assert!(infonce(tape.constant(Tensor::zeros(&[2, 3]))).is_err());
}

#[test]
fn infonce_nonnegative_and_bounded_when_positive_leads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let b = 2 + trial % 6;
        let mut s = rand_tensor(&mut rng, &[b, b], 3.0).into_data();
        let any = s.clone();
        // Raise each diagonal entry to its row maximum.
        for i in 0..b {
            let m = s[i * b..(i + 1) * b].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s[i * b + i] = m;
        }
        let tape = Tape::<f64>::new();
        let lead = infonce(tape.constant(Tensor::new(&[b, b], s).unwrap())).unwrap().item().unwrap();
        let free = infonce(tape.constant(Tensor::new(&[b, b], any).unwrap())).unwrap().item().unwrap();
        assert!(free >= 0.0 && lead >= 0.0);
        assert!(lead <= (b as f64).ln() + 1e-12, "{lead} > ln {b}");
    }
}

#[test]
fn infonce_row_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = rand_tensor(&mut rng, &[6, 6], 2.0);
    let shifts: Vec<f64> = (0..6).map(|_| rng.random_range(-50.0..50.0)).collect();
    let shifted = Tensor::from_fn(&[6, 6], |k| s.data()[k] + shifts[k / 6]);
    let tape = Tape::<f64>::new();
    let a = infonce(tape.constant(s)).unwrap().item().unwrap();
    let b = infonce(tape.constant(shifted)).unwrap().item().unwrap();
    assert_abs_diff_eq!(a, b, epsilon = 1e-6);
}

#[test]
fn infonce_matches_flat_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for b in 2..=4 {
        let s = rand_tensor(&mut rng, &[b, b], 2.0);
        let rows: Vec<Vec<f64>> = (0..b).map(|i| s.row(i).to_vec()).collect();
        let tape = Tape::<f64>::new();
        let l = infonce(tape.constant(s)).unwrap().item().unwrap();
        assert_abs_diff_eq!(l, oracle_infonce(&rows), epsilon = 1e-6);
    }
}

#[test]
fn accuracy_one_bounds_the_loss_by_the_margin() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let b = rng.random_range(2..7);
        let mut s = rand_tensor(&mut rng, &[b, b], 1.0).into_data();
        for i in 0..b {
            s[i * b + i] += rng.random_range(2.0..4.0);
        }
        let scores = Tensor::new(&[b, b], s.clone()).unwrap();
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::eye(b));
        let terms = global_t_dim_terms(g, tape.constant(scores), g).unwrap();
        let margin = (0..b)
            .map(|i| {
                let neg = (0..b).filter(|&j| j != i).map(|j| s[i * b + j]).fold(f64::NEG_INFINITY, f64::max);
                s[i * b + i] - neg
            })
            .fold(f64::INFINITY, f64::min);
        if terms.accuracy == Some(1.0) {
            let bound = (1.0 + (b - 1) as f64 * (-margin).exp()).ln();
            assert!(terms.total.item().unwrap() <= bound + 1e-12);
        } else {
            assert!(margin <= 0.0);
        }
    }
}

#[test]
fn stdim_matches_flat_oracle() {
    for (seed, b, l) in [(1, 2, 1), (2, 3, 2), (3, 4, 4), (4, 4, 3), (5, 2, 4)] {
        let fx = PairFixture::new(seed, b, l, 3, 2);
        let tape = Tape::<f64>::new();
        let t = stdim_terms(&fx.features(&tape), tape.constant(fx.wg.clone()), tape.constant(fx.wl.clone())).unwrap();
        let r = t.report().unwrap();
        let (mut gl, mut ll) = (0.0, 0.0);
        for (g, lm) in fx.scores() {
            gl += oracle_infonce(&g);
            ll += oracle_infonce(&lm);
        }
        assert_abs_diff_eq!(r.components["gl"], gl, epsilon = 1e-6);
        assert_abs_diff_eq!(r.components["ll"], ll, epsilon = 1e-6);
        assert_eq!(r.total, r.components["gl"] + r.components["ll"]);
        let acc = r.accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}

#[test]
fn stdim_degenerate_positives_give_two_mn_ln_b() {
    let (b, l) = (4, 3);
    let mut fx = PairFixture::new(9, b, l, 3, 2);
    // Every positive shares one local vector per location.
    fx.ln = Tensor::from_fn(&[l, b, 2], |k| (k / (2 * b)) as f64 * 0.5 + (k % 2) as f64);
    let tape = Tape::<f64>::new();
    let t = stdim_terms(&fx.features(&tape), tape.constant(fx.wg.clone()), tape.constant(fx.wl.clone())).unwrap();
    assert_abs_diff_eq!(t.total.item().unwrap(), 2.0 * l as f64 * (b as f64).ln(), epsilon = 1e-9);
}

#[test]
fn jsd_zero_scores_cost_two_ln_two_per_pair_set() {
    let tape = Tape::<f64>::new();
    let (l, _) = jsd_grid(tape.constant(Tensor::zeros(&[1, 4, 4]))).unwrap();
    assert_abs_diff_eq!(l.item().unwrap(), 2.0 * LN2, epsilon = 1e-6);
    let (l3, _) = jsd_grid(tape.constant(Tensor::zeros(&[3, 4, 4]))).unwrap();
    assert_abs_diff_eq!(l3.item().unwrap(), 6.0 * LN2, epsilon = 1e-6);
}

#[test]
fn jsd_saturation() {
    let tape = Tape::<f64>::new();
    let s = Tensor::from_fn(&[2, 3, 3], |k| if (k / 3) % 3 == k % 3 { 100.0 } else { -100.0 });
    let (l, acc) = jsd_grid(tape.constant(s)).unwrap();
    assert!(l.item().unwrap() < 1e-6);
    assert_eq!(acc, 1.0);
}

#[test]
fn jsd_stdim_matches_flat_oracle() {
    for (seed, b, l) in [(11, 2, 1), (12, 3, 4), (13, 4, 2)] {
        let fx = PairFixture::new(seed, b, l, 2, 3);
        let tape = Tape::<f64>::new();
        let r = jsd_stdim_terms(&fx.features(&tape), tape.constant(fx.wg.clone()), tape.constant(fx.wl.clone()))
            .unwrap()
            .report()
            .unwrap();
        let (mut gl, mut ll) = (0.0, 0.0);
        for (g, lm) in fx.scores() {
            gl += oracle_jsd(&g);
            ll += oracle_jsd(&lm);
        }
        assert_abs_diff_eq!(r.components["gl"], gl, epsilon = 1e-6);
        assert_abs_diff_eq!(r.components["ll"], ll, epsilon = 1e-6);
        assert_abs_diff_eq!(r.total, gl + ll, epsilon = 1e-12);
    }
}

#[test]
fn global_t_dim_matches_flat_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for b in 2..=4 {
        let g = rand_tensor(&mut rng, &[b, 3], 1.0);
        let gn = rand_tensor(&mut rng, &[b, 3], 1.0);
        let w = rand_tensor(&mut rng, &[3, 3], 1.0);
        let s: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| bil(g.row(i), &w, gn.row(j))).collect()).collect();
        let tape = Tape::<f64>::new();
        let t = global_t_dim_terms(tape.constant(g), tape.constant(w), tape.constant(gn)).unwrap();
        assert_abs_diff_eq!(t.total.item().unwrap(), oracle_infonce(&s), epsilon = 1e-6);
    }
}

#[test]
fn global_t_dim_is_gl_with_one_location() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (b, f) = (4, 3);
    let g = rand_tensor(&mut rng, &[b, f], 1.0);
    let gn = rand_tensor(&mut rng, &[b, f], 1.0);
    let w = rand_tensor(&mut rng, &[f, f], 1.0);
    let tape = Tape::<f64>::new();
    let global = global_t_dim_terms(tape.constant(g.clone()), tape.constant(w.clone()), tape.constant(gn.clone()))
        .unwrap()
        .report()
        .unwrap();
    let fx = PairFeatures {
        global_t: tape.constant(g.clone()),
        local_t: tape.constant(g.reshape(&[1, b, f]).unwrap()),
        global_next: tape.constant(gn.clone()),
        local_next: tape.constant(gn.reshape(&[1, b, f]).unwrap()),
    };
    let st = stdim_terms(&fx, tape.constant(w.clone()), tape.constant(w)).unwrap().report().unwrap();
    assert_abs_diff_eq!(global.total, st.components["gl"], epsilon = 1e-12);
}

/// Own frames `0..B`, foreign frames `B..2B−1`.
fn oracle_static(global: &Tensor<f64>, local: &Tensor<f64>, own: usize, wg: &Tensor<f64>, wl: &Tensor<f64>) -> (f64, f64) {
    let (mut gl, mut ll) = (0.0, 0.0);
    for l in 0..local.dim(0) {
        let (mut g_sum, mut l_sum) = (0.0, 0.0);
        for i in 0..own {
            let cand: Vec<usize> = std::iter::once(i).chain(own..2 * own - 1).collect();
            let gs: Vec<f64> = cand.iter().map(|&j| bil(global.row(i), wg, loc(local, l, j))).collect();
            let ls: Vec<f64> = cand.iter().map(|&j| bil(loc(local, l, i), wl, loc(local, l, j))).collect();
            g_sum += ce(&gs, 0);
            l_sum += ce(&ls, 0);
        }
        gl += g_sum / own as f64;
        ll += l_sum / own as f64;
    }
    (gl, ll)
}

#[test]
fn static_dim_matches_flat_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for (own, l) in [(2, 1), (3, 2), (4, 4)] {
        let n = 2 * own - 1;
        let global = rand_tensor(&mut rng, &[n, 3], 1.0);
        let local = rand_tensor(&mut rng, &[l, n, 2], 1.0);
        let wg = rand_tensor(&mut rng, &[3, 2], 1.0);
        let wl = rand_tensor(&mut rng, &[2, 2], 1.0);
        let (gl, ll) = oracle_static(&global, &local, own, &wg, &wl);
        let tape = Tape::<f64>::new();
        let r = static_dim_terms(
            tape.constant(global),
            tape.constant(local),
            own,
            tape.constant(wg),
            tape.constant(wl),
        )
        .unwrap()
        .report()
        .unwrap();
        assert_abs_diff_eq!(r.components["gl"], gl, epsilon = 1e-6);
        assert_abs_diff_eq!(r.components["ll"], ll, epsilon = 1e-6);
    }
}

#[test]
fn static_dim_uniform_features_give_ln_b_per_term() {
    let own = 4;
    let n = 2 * own - 1;
    let tape = Tape::<f64>::new();
    let r = static_dim_terms(
        tape.constant(Tensor::full(&[n, 3], 0.5)),
        tape.constant(Tensor::full(&[1, n, 2], 0.25)),
        own,
        tape.constant(Tensor::full(&[3, 2], 1.0)),
        tape.constant(Tensor::full(&[2, 2], 1.0)),
    )
    .unwrap()
    .report()
    .unwrap();
    assert_abs_diff_eq!(r.components["gl"], (own as f64).ln(), epsilon = 1e-6);
    assert_abs_diff_eq!(r.components["ll"], (own as f64).ln(), epsilon = 1e-6);
}

#[test]
fn static_dim_saturated_positives_vanish() {
    // Each own frame's global and local features align only with itself.
    let own = 3;
    let n = 2 * own - 1;
    let global = Tensor::from_fn(&[n, n], |k| if k / n == k % n && k / n < own { 30.0 } else { 0.0 });
    let local = Tensor::from_fn(&[1, n, n], |k| if k / n == k % n { 30.0 } else { 0.0 });
    let tape = Tape::<f64>::new();
    let t = static_dim_terms(
        tape.constant(global),
        tape.constant(local),
        own,
        tape.constant(Tensor::eye(n)),
        tape.constant(Tensor::eye(n)),
    )
    .unwrap();
    assert!(t.total.item().unwrap() < 1e-6);
}

#[test]
fn static_dim_needs_enough_foreign_frames() {
    let tape = Tape::<f64>::new();
    let r = static_dim_terms(
        tape.constant(Tensor::zeros(&[4, 3])),
        tape.constant(Tensor::zeros(&[1, 4, 2])),
        3,
        tape.constant(Tensor::zeros(&[3, 2])),
        tape.constant(Tensor::zeros(&[2, 2])),
    );
    assert!(matches!(r, Err(Error::InsufficientData(_))));
}

#[test]
fn gaussian_kl_anchors() {
    let tape = Tape::<f64>::new();
    let zero = gaussian_kl(tape.constant(Tensor::zeros(&[3, 4])), tape.constant(Tensor::zeros(&[3, 4]))).unwrap();
    assert_eq!(zero.item().unwrap(), 0.0);
    let one = gaussian_kl(tape.constant(Tensor::ones(&[1, 1])), tape.constant(Tensor::zeros(&[1, 1]))).unwrap();
    assert_abs_diff_eq!(one.item().unwrap(), 0.5, epsilon = 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mu = rand_tensor(&mut rng, &[2, 3], 1.0);
    let lv = rand_tensor(&mut rng, &[2, 3], 1.0);
    let want: f64 = mu
        .data()
        .iter()
        .zip(lv.data())
        .map(|(m, v)| 0.5 * (m * m + v.exp() - 1.0 - v))
        .sum::<f64>()
        / 2.0;
    let got = gaussian_kl(tape.constant(mu), tape.constant(lv)).unwrap().item().unwrap();
    assert_abs_diff_eq!(got, want, epsilon = 1e-12);
}

#[test]
fn reconstruction_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = rand_tensor(&mut rng, &[3, 1, 4, 4], 1.0);
    let tape = Tape::<f64>::new();
    let same = summed_squared_error(tape.constant(x.clone()), tape.constant(x.clone())).unwrap();
    assert_eq!(same.item().unwrap(), 0.0);
    let shifted = summed_squared_error(tape.constant(x.map(|v| v + 0.5)), tape.constant(x.clone())).unwrap();
    assert_abs_diff_eq!(shifted.item().unwrap(), 16.0 * 0.25, epsilon = 1e-12);
    assert!(summed_squared_error(tape.constant(x.clone()), tape.constant(Tensor::zeros(&[3, 1, 4, 3]))).is_err());
}

#[test]
fn constant_predictor_reaches_per_pixel_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = rand_tensor(&mut rng, &[1, 1, 3, 3], 1.0);
    let b = rand_tensor(&mut rng, &[1, 1, 3, 3], 1.0);
    let targets = Tensor::concat_outer(&[&a, &b]).unwrap();
    let mean = a.zip_map(&b, |x, y| 0.5 * (x + y)).unwrap();
    let pred = Tensor::concat_outer(&[&mean, &mean]).unwrap();
    let variance: f64 = a.data().iter().zip(b.data()).map(|(x, y)| 0.25 * (x - y) * (x - y)).sum::<f64>() / 9.0;
    let tape = Tape::<f64>::new();
    let l = mean_squared_error(tape.constant(pred), tape.constant(targets)).unwrap().item().unwrap();
    assert_abs_diff_eq!(l, variance, epsilon = 1e-12);
    assert!(l >= 0.0);
}

fn cpc_oracle(contexts: &[Tensor<f64>], zs: &[Tensor<f64>], ws: &[Tensor<f64>], context: usize) -> Vec<f64> {
    let len = zs.len();
    let k_max = ws.len();
    ws.iter()
        .enumerate()
        .map(|(k, w)| {
            let ts: Vec<usize> = (context - 1..=len - 1 - k_max).collect();
            ts.iter()
                .map(|&t| {
                    let b = zs[0].dim(0);
                    let s: Vec<Vec<f64>> = (0..b)
                        .map(|i| (0..b).map(|j| bil(contexts[t].row(i), w, zs[t + k + 1].row(j))).collect())
                        .collect();
                    oracle_infonce(&s)
                })
                .sum::<f64>()
                / ts.len() as f64
        })
        .collect()
}

#[test]
fn cpc_matches_flat_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for (b, len, k, context) in [(2, 3, 1, 1), (3, 6, 2, 2), (4, 7, 3, 3)] {
        let zs: Vec<Tensor<f64>> = (0..len).map(|_| rand_tensor(&mut rng, &[b, 3], 1.0)).collect();
        let cs: Vec<Tensor<f64>> = (0..len).map(|_| rand_tensor(&mut rng, &[b, 2], 1.0)).collect();
        let ws: Vec<Tensor<f64>> = (0..k).map(|_| rand_tensor(&mut rng, &[2, 3], 1.0)).collect();
        let want = cpc_oracle(&cs, &zs, &ws, context);
        let tape = Tape::<f64>::new();
        let zv: Vec<Var<f64>> = zs.iter().map(|z| tape.constant(z.clone())).collect();
        let cv: Vec<Var<f64>> = cs.iter().map(|c| tape.constant(c.clone())).collect();
        let wv: Vec<Var<f64>> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let r = cpc_terms(&cv, &zv, &wv, context).unwrap().report().unwrap();
        for (i, w) in want.iter().enumerate() {
            assert_abs_diff_eq!(r.components[&format!("k{}", i + 1)], *w, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(r.total, want.iter().sum::<f64>() / k as f64, epsilon = 1e-6);
    }
}

#[test]
fn cpc_identity_single_horizon_is_global_t_dim() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let zs: Vec<Tensor<f64>> = (0..2).map(|_| rand_tensor(&mut rng, &[4, 3], 1.0)).collect();
    let w = rand_tensor(&mut rng, &[3, 3], 1.0);
    let tape = Tape::<f64>::new();
    let zv: Vec<Var<f64>> = zs.iter().map(|z| tape.constant(z.clone())).collect();
    let cpc = cpc_terms(&zv, &zv, &[tape.constant(w.clone())], 1).unwrap();
    let gt = global_t_dim_terms(zv[0], tape.constant(w), zv[1]).unwrap();
    assert_abs_diff_eq!(cpc.total.item().unwrap(), gt.total.item().unwrap(), epsilon = 1e-12);
}

#[test]
fn cpc_uniform_scores_give_ln_b() {
    let tape = Tape::<f64>::new();
    let zv: Vec<Var<f64>> = (0..5).map(|_| tape.constant(Tensor::full(&[3, 2], 1.0))).collect();
    let w = tape.constant(Tensor::full(&[2, 2], 0.1));
    let r = cpc_terms(&zv, &zv, &[w, w], 2).unwrap().report().unwrap();
    assert_abs_diff_eq!(r.total, 3f64.ln(), epsilon = 1e-6);
}

#[test]
fn cpc_rejects_short_sequences() {
    let tape = Tape::<f64>::new();
    let zv: Vec<Var<f64>> = (0..3).map(|_| tape.constant(Tensor::zeros(&[2, 2]))).collect();
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(cpc_terms(&zv, &zv, &[w, w], 2), Err(Error::InsufficientData(_))));
}

#[test]
fn supervised_uniform_logits_cost_v_ln_256() {
    let tape = Tape::<f64>::new();
    let logits: Vec<(String, Var<f64>)> = ["a", "b", "c"]
        .iter()
        .map(|n| (n.to_string(), tape.constant(Tensor::zeros(&[5, 256]))))
        .collect();
    let labels = vec![vec![0, 1, 2, 3, 255]; 3];
    let t = supervised_terms(&logits, &labels).unwrap();
    assert_abs_diff_eq!(t.total.item().unwrap(), 3.0 * 256f64.ln(), epsilon = 1e-9);
}

#[test]
fn supervised_single_variable_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_tensor(&mut rng, &[3, 256], 2.0);
    let y = vec![7, 0, 200];
    let want = (0..3).map(|i| ce(x.row(i), y[i])).sum::<f64>() / 3.0;
    let tape = Tape::<f64>::new();
    let t = supervised_terms(&[("v".into(), tape.constant(x))], &[y]).unwrap();
    assert_abs_diff_eq!(t.total.item().unwrap(), want, epsilon = 1e-9);
    let perfect = Tensor::from_fn(&[2, 256], |k| if k % 256 == 4 { 100.0 } else { 0.0 });
    let t = supervised_terms(&[("v".into(), tape.constant(perfect))], &[vec![4, 4]]).unwrap();
    assert!(t.total.item().unwrap() < 1e-6);
}

// Model-level tests on 16×16 frames.

fn tiny_options() -> ModelOptions {
    ModelOptions {
        cpc_context: 2,
        cpc_horizons: 2,
        cpc_identity: false,
        probe_variables: vec!["a".into(), "b".into()],
    }
}

fn frames<T: stdim_core::tensor::Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, 1, 16, 16], |_| T::of(rng.random_range(0.0..1.0)))
}

fn batch_for<T: stdim_core::tensor::Scalar>(method: MethodId, b: usize, seed: u64) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match method {
        MethodId::Stdim | MethodId::JsdStdim | MethodId::GlobalTDim | MethodId::PixelPred => {
            Batch::Pairs(ContrastiveBatch {
                anchors: frames(&mut rng, b),
                positives: frames(&mut rng, b),
                origins: (0..b)
                    .map(|i| PairOrigin {
                        episode: i as u64,
                        t: 0,
                        frame: i,
                    })
                    .collect(),
            })
        }
        MethodId::StaticDim => Batch::Static {
            anchors: frames(&mut rng, b),
            foreign: frames(&mut rng, b - 1),
        },
        MethodId::Vae | MethodId::RandomCnn => Batch::Frames {
            frames: frames(&mut rng, b),
            labels: Vec::new(),
        },
        MethodId::Supervised => Batch::Frames {
            frames: frames(&mut rng, b),
            labels: vec![(0..b).map(|i| i * 7 % 256).collect(), (0..b).map(|i| 255 - i).collect()],
        },
        MethodId::Cpc => Batch::Sequences(SequenceBatch {
            frames: frames(&mut rng, b * 4),
            batch: b,
            len: 4,
            starts: (0..b).collect(),
        }),
    }
}

const TRAINED: [MethodId; 8] = [
    MethodId::Stdim,
    MethodId::JsdStdim,
    MethodId::GlobalTDim,
    MethodId::StaticDim,
    MethodId::Vae,
    MethodId::PixelPred,
    MethodId::Cpc,
    MethodId::Supervised,
];

#[test]
fn method_ids_round_trip() {
    for m in MethodId::ALL {
        assert_eq!(m.id().parse::<MethodId>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!(matches!("dim-st".parse::<MethodId>(), Err(Error::UnknownMethod(_))));
}

#[test]
fn frozen_encoder_gets_zero_gradient_under_every_loss() {
    for m in TRAINED {
        let mut model = Model::<f32>::new(m, EncoderConfig::tiny(8, 1), tiny_options()).unwrap();
        model.encoder.freeze();
        let batch = batch_for::<f32>(m, 3, 2);
        let tape = Tape::new();
        let terms = model.loss(&tape, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.backward_into(terms.total, &mut model).unwrap();
        for p in model.encoder.params() {
            assert!(p.grad().is_none_or(|g| g.data().iter().all(|&v| v == 0.0)), "{m}: {}", p.name());
        }
        let head_grad: f32 = model.heads.params().iter().filter_map(|p| p.grad()).map(|g| g.max_abs()).sum();
        assert!(head_grad > 0.0, "{m} heads got no gradient");
    }
}

#[test]
fn unfrozen_encoder_receives_gradient() {
    for m in TRAINED {
        let mut model = Model::<f32>::new(m, EncoderConfig::tiny(8, 1), tiny_options()).unwrap();
        let batch = batch_for::<f32>(m, 3, 2);
        let tape = Tape::new();
        let terms = model.loss(&tape, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        tape.backward_into(terms.total, &mut model).unwrap();
        let g: f32 = model.encoder.params().iter().filter_map(|p| p.grad()).map(|g| g.max_abs()).sum();
        assert!(g > 0.0, "{m}");
    }
}

#[test]
fn permuting_pairs_leaves_losses_unchanged() {
    let perm = [2usize, 0, 3, 1];
    for m in [MethodId::Stdim, MethodId::JsdStdim, MethodId::GlobalTDim, MethodId::PixelPred] {
        let model = Model::<f64>::new(m, EncoderConfig::tiny(8, 3), tiny_options()).unwrap();
        let Batch::Pairs(p) = batch_for::<f64>(m, 4, 5) else { unreachable!() };
        let q = ContrastiveBatch {
            anchors: p.anchors.gather_outer(&perm).unwrap(),
            positives: p.positives.gather_outer(&perm).unwrap(),
            origins: perm.iter().map(|&i| p.origins[i]).collect(),
        };
        let eval = |b: ContrastiveBatch<f64>| {
            let tape = Tape::new();
            model
                .loss(&tape, &Batch::Pairs(b), &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap()
                .report()
                .unwrap()
                .total
        };
        assert_abs_diff_eq!(eval(p), eval(q), epsilon = 1e-6);
    }
}

#[test]
fn loss_dispatch_rejects_mismatched_batches() {
    let model = Model::<f32>::new(MethodId::Stdim, EncoderConfig::tiny(8, 1), tiny_options()).unwrap();
    let tape = Tape::new();
    let r = model.loss(&tape, &batch_for(MethodId::Vae, 3, 0), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Contract(_))));
    let rc = Model::<f32>::new(MethodId::RandomCnn, EncoderConfig::tiny(8, 1), tiny_options()).unwrap();
    let r = rc.loss(&tape, &batch_for(MethodId::Vae, 3, 0), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn model_stdim_equals_terms_on_encoded_features() {
    let model = Model::<f64>::new(MethodId::Stdim, EncoderConfig::tiny(8, 4), tiny_options()).unwrap();
    let Batch::Pairs(p) = batch_for::<f64>(MethodId::Stdim, 3, 6) else { unreachable!() };
    let tape = Tape::new();
    let via_model = model
        .loss(&tape, &Batch::Pairs(p.clone()), &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap()
        .report()
        .unwrap();
    let a = model.encoder.forward(&tape, tape.constant(p.anchors.clone())).unwrap();
    let b = model.encoder.forward(&tape, tape.constant(p.positives.clone())).unwrap();
    let Heads::Score(h) = &model.heads else { unreachable!() };
    let f = PairFeatures {
        global_t: a.global,
        local_t: a.local,
        global_next: b.global,
        local_next: b.local,
    };
    let direct = stdim_terms(&f, tape.bind(&h.w_g), tape.bind(&h.w_l)).unwrap().report().unwrap();
    assert_abs_diff_eq!(via_model.total, direct.total, epsilon = 1e-9);
}

// Training loop.

fn toy_world(style_foreign: bool) -> SpriteWorldConfig {
    let base = if style_foreign {
        SpriteWorldConfig::foreign()
    } else {
        SpriteWorldConfig::default()
    };
    SpriteWorldConfig {
        size: 24,
        agent_size: 3,
        enemy_size: 3,
        enemy_rows: vec![12, 18],
        enemy_speeds: vec![1, 2],
        room_period: 16,
        episode_len: 128,
        ..base
    }
}

fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        height: 24,
        width: 24,
        in_channels: 1,
        convs: vec![
            ConvSpec {
                channels: 8,
                kernel: 4,
                stride: 2,
            },
            ConvSpec {
                channels: 16,
                kernel: 3,
                stride: 2,
            },
        ],
        local_layer: 0,
        feature_dim: 32,
        seed: 0,
    }
}

fn toy_collect(env: SpriteWorldConfig, seed: u64) -> TrajectoryDataset {
    collect(&CollectConfig {
        env,
        workers: 2,
        frames_per_worker: 200,
        seed,
        ..CollectConfig::default()
    })
    .unwrap()
}

/// Episodes from two environments sharing one variable table.
fn two_env_dataset() -> TrajectoryDataset {
    let a = toy_collect(toy_world(false), 1);
    let b = toy_collect(toy_world(true), 2);
    let mut episodes = a.episodes.clone();
    episodes.extend(b.episodes.iter().cloned().map(|mut e| {
        e.id |= 1 << 63;
        e
    }));
    TrajectoryDataset::new("toy-mix", a.height, a.width, a.variables.clone(), a.provenance.clone(), episodes).unwrap()
}

fn toy_train(method: MethodId, steps: usize) -> TrainConfig {
    TrainConfig {
        method,
        encoder: toy_encoder(),
        options: ModelOptions {
            cpc_context: 4,
            cpc_horizons: 2,
            ..ModelOptions::default()
        },
        steps,
        batch_size: 16,
        sequence_batch: 6,
        sequence_len: 8,
        eval_every: 10,
        log_every: 1,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn stdim_training_lowers_smoothed_loss() {
    let ds = two_env_dataset();
    let out = train_encoder(
        &toy_train(MethodId::Stdim, 50),
        TrainData {
            dataset: &ds,
            foreign: None,
            labels: None,
        },
    )
    .unwrap();
    let train: Vec<f64> = out.log.iter().filter(|r| r.phase == Phase::Train).map(|r| r.loss.total).collect();
    assert_eq!(train.len(), 50);
    let head = train[..10].iter().sum::<f64>() / 10.0;
    let tail = train[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "smoothed loss went from {head} to {tail}");
}

#[test]
fn every_method_trains_a_few_steps() {
    let ds = two_env_dataset();
    let foreign = toy_collect(toy_world(true), 3);
    let labels = LabelSplit {
        train: (0..300).collect(),
        val: (300..400).collect(),
        variables: vec![0, 2],
    };
    for m in TRAINED {
        let data = TrainData {
            dataset: &ds,
            foreign: Some(&foreign),
            labels: Some(&labels),
        };
        let out = train_encoder(&toy_train(m, 10), data).unwrap();
        assert!(out.log.iter().any(|r| r.phase == Phase::Val), "{m}");
        assert!(out.log.iter().all(|r| r.loss.total.is_finite()), "{m}");
        let fresh = Model::<f32>::new(m, EncoderConfig { seed: 7, ..toy_encoder() }, out.model.options.clone()).unwrap();
        assert_ne!(fresh.encoder.param_hash(), out.model.encoder.param_hash(), "{m} did not move");
    }
}

#[test]
fn training_is_deterministic() {
    let ds = two_env_dataset();
    let run = |m| {
        let out = train_encoder(
            &toy_train(m, 12),
            TrainData {
                dataset: &ds,
                foreign: None,
                labels: None,
            },
        )
        .unwrap();
        let mut log = Vec::new();
        out.write_log(&mut log).unwrap();
        (Checkpoint::from_model("", &out.model).to_bytes(), log)
    };
    for m in [MethodId::Stdim, MethodId::Vae, MethodId::Cpc] {
        assert_eq!(run(m), run(m), "{m}");
    }
}

#[test]
fn random_cnn_returns_the_initialized_encoder() {
    let ds = two_env_dataset();
    let out = train_encoder(
        &toy_train(MethodId::RandomCnn, 2000),
        TrainData {
            dataset: &ds,
            foreign: None,
            labels: None,
        },
    )
    .unwrap();
    assert!(out.log.is_empty());
    let init = stdim_core::encoder::Encoder::<f32>::new(EncoderConfig { seed: 7, ..toy_encoder() }).unwrap();
    assert_eq!(init.param_hash(), out.model.encoder.param_hash());
}

#[test]
fn training_reports_missing_inputs() {
    let ds = two_env_dataset();
    let data = TrainData {
        dataset: &ds,
        foreign: None,
        labels: None,
    };
    assert!(matches!(train_encoder(&toy_train(MethodId::Supervised, 5), data), Err(Error::Config(_))));
    assert!(matches!(train_encoder(&toy_train(MethodId::StaticDim, 5), data), Err(Error::Config(_))));
    let big = TrainConfig {
        batch_size: 100_000,
        ..toy_train(MethodId::Stdim, 5)
    };
    assert!(matches!(train_encoder(&big, data), Err(Error::InsufficientData(_))));
}

#[test]
fn log_lines_are_json_records() {
    let ds = two_env_dataset();
    let out = train_encoder(
        &toy_train(MethodId::JsdStdim, 10),
        TrainData {
            dataset: &ds,
            foreign: None,
            labels: None,
        },
    )
    .unwrap();
    let mut buf = Vec::new();
    out.write_log(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), out.log.len());
    for (line, rec) in lines.iter().zip(&out.log) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], rec.step);
        assert!(v["components"]["gl"].is_number());
        assert!(v["lr"].as_f64().unwrap() > 0.0);
        let back: LogRecord = serde_json::from_str(line).unwrap();
        assert_eq!(&back, rec);
    }
}
