use std::collections::{BTreeMap, HashSet};

use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdim_core::checkpoint::Checkpoint;
use stdim_core::encoder::{Encoder, EncoderConfig};
use stdim_core::envstream::*;
use stdim_core::error::Error;
use stdim_core::probe::*;
use stdim_core::tensor::Tensor;

fn provenance() -> Provenance {
    Provenance {
        policy: "fixture".into(),
        epsilon: 0.0,
        seed: 0,
        workers: 1,
    }
}

/// One episode, 2×2 frames; frame `i` gets pixels from `pixel(i)` and
/// labels from `labels(i)`.
fn crafted(
    n: usize,
    vars: Vec<VariableSpec>,
    pixel: impl Fn(usize) -> [u8; 4],
    labels: impl Fn(usize) -> Vec<u8>,
) -> TrajectoryDataset {
    let ep = Episode {
        id: 0,
        timesteps: (0..n as u32).collect(),
        pixels: (0..n).flat_map(&pixel).collect(),
        labels: (0..n).flat_map(&labels).collect(),
    };
    TrajectoryDataset::new("fixture", 2, 2, vars, provenance(), vec![ep]).unwrap()
}

fn distinct_pixels(i: usize) -> [u8; 4] {
    [(i & 255) as u8, (i >> 8) as u8, 7, 9]
}

#[test]
fn entropy_closed_forms() {
    assert_eq!(entropy(&[5; 40]), 0.0);
    assert_abs_diff_eq!(entropy(&[0, 1, 0, 1]), std::f64::consts::LN_2, epsilon = 1e-12);
    let skew: Vec<u8> = (0..100).map(|i| u8::from(i < 10)).collect();
    let h = entropy(&skew);
    assert_abs_diff_eq!(h, -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln()), epsilon = 1e-12);
    assert_abs_diff_eq!(h, 0.325, epsilon = 1e-3);
}

fn pruning_fixture() -> TrajectoryDataset {
    let vars = vec![
        VariableSpec::new("constant", Category::Misc, 0, 255),
        VariableSpec::new("binary", Category::Misc, 0, 255),
        VariableSpec::new("skewed", Category::Misc, 0, 255),
        VariableSpec::new("wide", Category::AgentLoc, 0, 255),
    ];
    crafted(100, vars, distinct_pixels, |i| vec![3, (i % 2) as u8, u8::from(i % 10 == 0), (i % 50) as u8])
}

#[test]
fn pruning_keeps_informative_variables() {
    let ds = pruning_fixture();
    let all: Vec<usize> = (0..100).collect();
    assert_eq!(prune_low_entropy(&ds, &all, 0.6).unwrap(), vec![1, 3]);
    assert_eq!(prune_low_entropy(&ds, &all, 0.0).unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn pruning_is_monotone_in_the_threshold() {
    let ds = pruning_fixture();
    let all: Vec<usize> = (0..100).collect();
    let mut prev: Option<Vec<usize>> = None;
    for k in 0..50 {
        let kept = prune_low_entropy(&ds, &all, k as f64 * 0.1).unwrap();
        if let Some(p) = &prev {
            assert!(kept.iter().all(|v| p.contains(v)));
        }
        prev = Some(kept);
    }
}

#[test]
fn pruning_rejects_empty_input_and_negative_threshold() {
    let ds = pruning_fixture();
    assert!(matches!(prune_low_entropy(&ds, &[], 0.6), Err(Error::InsufficientData(_))));
    assert!(matches!(prune_low_entropy(&ds, &[0], -1.0), Err(Error::Config(_))));
}

#[test]
fn f1_worked_example() {
    let s = scores(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
    assert_abs_diff_eq!(s.f1, 1.0 / 3.0, epsilon = 1e-12);
    assert_abs_diff_eq!(s.f1_macro, 1.0 / 3.0, epsilon = 1e-12);
    assert_eq!(s.accuracy, 0.5);
}

#[test]
fn f1_perfect_and_disjoint() {
    let y = [3u8, 3, 9, 200, 0];
    assert_eq!(f1_score(&y, &y).unwrap(), 1.0);
    assert_eq!(accuracy(&y, &y).unwrap(), 1.0);
    assert_eq!(f1_score(&[1, 1, 2, 2, 4], &y).unwrap(), 0.0);
    assert_eq!(f1_macro(&[1, 1, 2, 2, 4], &y).unwrap(), 0.0);
}

#[test]
fn metrics_reject_length_mismatch() {
    assert!(f1_score(&[1, 2], &[1]).is_err());
    assert!(accuracy(&[], &[]).is_err());
}

/// Confusion-matrix oracle.
fn oracle(preds: &[u8], labels: &[u8]) -> Scores {
    let mut m: BTreeMap<(u8, u8), u64> = BTreeMap::new();
    for (&p, &y) in preds.iter().zip(labels) {
        *m.entry((y, p)).or_default() += 1;
    }
    let classes: Vec<u8> = labels.iter().copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
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

#[test]
fn metrics_equal_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let k = rng.random_range(1..=256u32);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..k) as u8).collect();
        let preds: Vec<u8> = labels
            .iter()
            .map(|&y| if rng.random_bool(0.5) { y } else { rng.random_range(0..k) as u8 })
            .collect();
        assert_eq!(scores(&preds, &labels).unwrap(), oracle(&preds, &labels));
    }
}

#[test]
fn majority_classifier_cases() {
    assert_eq!(maj_clf_baseline(&[4, 4, 1], &[4, 4, 4]).unwrap().accuracy, 1.0);
    assert_eq!(maj_clf_baseline(&[0, 0, 1], &[0, 1, 0, 1]).unwrap().accuracy, 0.5);
    // Train mode 2; test has 3×2, 1×5, 1×7: class 2 has P = 3/5, R = 1 → F1 = 0.75.
    let s = maj_clf_baseline(&[2, 2, 2, 5, 7], &[2, 5, 2, 7, 2]).unwrap();
    assert_eq!(s.accuracy, 0.6);
    assert_abs_diff_eq!(s.f1, 0.6 * 0.75, epsilon = 1e-12);
    assert_abs_diff_eq!(s.f1_macro, 0.25, epsilon = 1e-12);
    assert_eq!(mode(&[9, 3, 3, 9]).unwrap(), 3);
}

fn result(name: &str, cat: Category, f1: f64) -> VariableResult {
    VariableResult {
        name: name.into(),
        category: cat.name().into(),
        scores: Scores {
            f1,
            f1_macro: f1 / 2.0,
            accuracy: 1.0 - f1,
        },
        train_accuracy: 1.0,
    }
}

#[test]
fn report_one_variable_per_category() {
    let f = [0.1, 0.2, 0.4, 0.8, 0.5];
    let vars = Category::ALL.iter().zip(f).map(|(&c, x)| result(c.name(), c, x)).collect();
    let r = build_report(vars).unwrap();
    assert_eq!(r.categories.len(), 5);
    assert_abs_diff_eq!(r.overall.f1, 2.0 / 5.0, epsilon = 1e-12);
}

#[test]
fn report_omits_empty_categories() {
    let r = build_report(vec![result("a", Category::AgentLoc, 0.3), result("b", Category::Misc, 0.9)]).unwrap();
    assert_eq!(r.categories.len(), 2);
    assert_abs_diff_eq!(r.overall.f1, 0.6, epsilon = 1e-12);
}

#[test]
fn report_seven_variables_by_hand() {
    let vars = vec![
        result("ax", Category::AgentLoc, 0.9),
        result("ay", Category::AgentLoc, 0.7),
        result("bx", Category::SmallLoc, 0.2),
        result("by", Category::SmallLoc, 0.4),
        result("e1", Category::OtherLoc, 0.6),
        result("e2", Category::OtherLoc, 0.3),
        result("score", Category::ScoreClockLivesDisplay, 0.5),
    ];
    let r = build_report(vars).unwrap();
    // Category means 0.8, 0.3, 0.45, 0.5.
    assert_abs_diff_eq!(r.categories["AgentLoc"].f1, 0.8, epsilon = 1e-12);
    assert_abs_diff_eq!(r.overall.f1, (0.8 + 0.3 + 0.45 + 0.5) / 4.0, epsilon = 1e-12);
    assert_abs_diff_eq!(r.overall.accuracy, 1.0 - (0.8 + 0.3 + 0.45 + 0.5) / 4.0, epsilon = 1e-12);
}

fn sizes(train: usize, val: usize, test: usize) -> SplitSizes {
    SplitSizes { train, val, test }
}

#[test]
fn splits_honor_sizes_and_seed() {
    let ds = crafted(300, vec![], distinct_pixels, |_| vec![]);
    let a = make_splits(&ds, sizes(150, 50, 100), 4).unwrap();
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (150, 50, 100));
    assert_eq!(a, make_splits(&ds, sizes(150, 50, 100), 4).unwrap());
    assert_ne!(a, make_splits(&ds, sizes(150, 50, 100), 5).unwrap());
    let all: HashSet<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
    assert_eq!(all.len(), 300);
    assert!(matches!(make_splits(&ds, sizes(200, 50, 51), 0), Err(Error::InsufficientData(_))));
}

#[test]
fn planted_duplicates_never_reach_test() {
    // Only 20 distinct images among 200 frames.
    let ds = crafted(200, vec![], |i| distinct_pixels(i % 20), |_| vec![]);
    let s = make_splits(&ds, sizes(10, 10, 5), 1);
    let Ok(s) = s else {
        return assert!(matches!(s, Err(Error::InsufficientData(_))));
    };
    let train: HashSet<&[u8]> = s.train.iter().map(|&f| ds.pixels(f)).collect();
    assert!(s.test.iter().all(|&f| !train.contains(ds.pixels(f))));
}

#[test]
fn dedup_count_equals_planted_duplicates() {
    let clean = crafted(400, vec![], distinct_pixels, |_| vec![]);
    let sz = sizes(200, 50, 100);
    let base = make_splits(&clean, sz, 9).unwrap();
    assert_eq!(base.dedup_replacements, 0);
    for k in [1usize, 5, 17] {
        // Overwrite k test frames with copies of train frames; the shuffle
        // only depends on the frame count, so the same candidates come up.
        let victims: HashSet<usize> = base.test[..k].iter().copied().collect();
        let sources: Vec<usize> = base.train[..k].to_vec();
        let planted = crafted(
            400,
            vec![],
            |i| match base.test[..k].iter().position(|&t| t == i) {
                Some(j) => distinct_pixels(sources[j]),
                None => distinct_pixels(i),
            },
            |_| vec![],
        );
        let s = make_splits(&planted, sz, 9).unwrap();
        assert_eq!(s.dedup_replacements, k);
        assert!(s.test.iter().all(|f| !victims.contains(f)));
        assert_eq!(s.train, base.train);
        let train: HashSet<&[u8]> = s.train.iter().map(|&f| planted.pixels(f)).collect();
        assert!(s.test.iter().all(|&f| !train.contains(planted.pixels(f))));
    }
}

fn onehot_features(labels: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(&[labels.len(), 16], |k| {
        let (r, c) = (k / 16, k % 16);
        let hot = if labels[r] / 20 == c { 1.0 } else { 0.0 };
        hot + rng.random_range(-0.05..0.05)
    })
}

fn draw_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| 20 * rng.random_range(0..10)).collect()
}

fn quick_cfg() -> ProbeConfig {
    ProbeConfig {
        max_steps: 20_000,
        ..ProbeConfig::default()
    }
}

fn test_f1(fit: &ProbeFit, x: &Tensor<f32>, y: &[usize]) -> f64 {
    let y8: Vec<u8> = y.iter().map(|&v| v as u8).collect();
    f1_score(&fit.probe.predict(x).unwrap(), &y8).unwrap()
}

#[test]
fn decodable_labels_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (ytr, yva, yte) = (draw_labels(600, &mut rng), draw_labels(150, &mut rng), draw_labels(300, &mut rng));
    let (xtr, xva, xte) = (
        onehot_features(&ytr, &mut rng),
        onehot_features(&yva, &mut rng),
        onehot_features(&yte, &mut rng),
    );
    let fit = train_probe("v", (&xtr, &ytr), (&xva, &yva), &quick_cfg()).unwrap();
    assert!(test_f1(&fit, &xte, &yte) >= 0.95);
}

#[test]
fn independent_labels_score_like_the_majority_classifier() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let skewed = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..n).map(|_| if rng.random_bool(0.6) { 7 } else { rng.random_range(0..4) }).collect()
    };
    let (ytr, yva, yte) = (skewed(800, &mut rng), skewed(200, &mut rng), skewed(400, &mut rng));
    let noise = |n: usize, rng: &mut ChaCha8Rng| Tensor::from_fn(&[n, 16], |_| rng.random_range(-1.0f32..1.0));
    let (xtr, xva, xte) = (noise(800, &mut rng), noise(200, &mut rng), noise(400, &mut rng));
    let fit = train_probe("v", (&xtr, &ytr), (&xva, &yva), &quick_cfg()).unwrap();
    let to8 = |y: &[usize]| y.iter().map(|&v| v as u8).collect::<Vec<u8>>();
    let maj = maj_clf_baseline(&to8(&ytr), &to8(&yte)).unwrap().f1;
    let f1 = test_f1(&fit, &xte, &yte);
    assert!((f1 - maj).abs() <= 0.05, "probe {f1} vs maj-clf {maj}");
}

#[test]
fn probe_rejects_labels_beyond_a_byte() {
    let x = Tensor::<f32>::zeros(&[3, 4]);
    let r = train_probe("v", (&x, &[1, 256, 2]), (&x, &[0, 0, 0]), &quick_cfg());
    assert!(matches!(r, Err(Error::Index { .. })));
}

fn world_dataset() -> TrajectoryDataset {
    collect(&CollectConfig {
        workers: 2,
        frames_per_worker: 300,
        seed: 5,
        ..CollectConfig::default()
    })
    .unwrap()
}

#[test]
fn probing_leaves_the_encoder_untouched_and_is_deterministic() {
    let ds = world_dataset();
    let split = make_splits(&ds, sizes(300, 100, 150), 0).unwrap();
    let retained = prune_low_entropy(&ds, &split.train, 0.6).unwrap();
    let lives = ds.variable_index("lives").unwrap();
    assert!(!retained.contains(&lives));
    let enc = Encoder::<f32>::new(EncoderConfig {
        feature_dim: 32,
        ..EncoderConfig::default()
    })
    .unwrap();
    let before = Checkpoint::from_model("", &enc).to_bytes();
    let cfg = ProbeConfig {
        max_steps: 300,
        ..ProbeConfig::default()
    };
    let run = || {
        let feats = encode_splits(&enc, &ds, &split).unwrap();
        probe_variables(&ds, &split, &feats, &retained, &cfg).unwrap()
    };
    let a = run();
    assert_eq!(Checkpoint::from_model("", &enc).to_bytes(), before);
    assert_eq!(a, run());
    for (p, m) in a.probe.iter().zip(&a.maj_clf) {
        assert_eq!(p.name, m.name);
        assert!(p.train_accuracy >= m.train_accuracy - 0.02, "{}: {} < {}", p.name, p.train_accuracy, m.train_accuracy);
    }
}

fn sample_report() -> ProbeReport {
    let vars = vec![result("ax", Category::AgentLoc, 0.9), result("bx", Category::SmallLoc, 0.2)];
    let meta = ReportMetadata {
        env_id: "spriteworld".into(),
        dataset_hash: "00".into(),
        encoder_hash: "11".into(),
        encoder_seed: 1,
        probe_seed: 2,
        split_seed: 3,
        split_sizes: sizes(1, 1, 1),
        dedup_replacements: 0,
        entropy_threshold: 0.6,
        retained: vec!["ax".into(), "bx".into()],
        pruned: vec!["lives".into()],
    };
    ProbeReport::new(
        "stdim",
        meta,
        ProbeOutcome {
            probe: vars.clone(),
            maj_clf: vars,
        },
    )
    .unwrap()
}

#[test]
fn report_json_round_trip_and_validation() {
    let r = sample_report();
    let text = r.to_json().unwrap();
    assert_eq!(ProbeReport::from_json(&text).unwrap(), r);
    let mut bad = r.clone();
    bad.probe.overall.f1 += 0.1;
    assert!(ProbeReport::from_json(&bad.to_json().unwrap()).is_err());
    let mut range = r.clone();
    range.probe.variables[0].scores.accuracy = 1.5;
    assert!(range.validate().is_err());
    let mut tag = r;
    tag.format = "other".into();
    assert!(tag.validate().is_err());
}

#[test]
fn report_csv_lists_probe_and_majority_rows() {
    let csv = sample_report().to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,level,name,category,f1,f1_macro,accuracy");
    // 2 variables + 2 categories + overall, twice.
    assert_eq!(lines.len(), 1 + 2 * 5);
    assert!(lines.iter().any(|l| l.starts_with("maj-clf,overall")));
    assert!(lines.iter().any(|l| l.starts_with("stdim,variable,ax,AgentLoc,0.9,")));
}
