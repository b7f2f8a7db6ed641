//! Probing a frozen encoder end to end, and the resulting reports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::linear::{train_probe, ProbeConfig, Standardizer};
use super::metrics::{maj_clf_baseline, mode, scores, Scores};
use super::split::{ProbeSplit, SplitSizes};
use crate::encoder::Encoder;
use crate::envstream::{Category, TrajectoryDataset, VariableSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const REPORT_FORMAT: &str = "stdim-probe-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableResult {
    pub name: String,
    pub category: String,
    /// Test-split scores.
    pub scores: Scores,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variables: Vec<VariableResult>,
    /// Unweighted mean over each category's variables.
    pub categories: BTreeMap<String, Scores>,
    /// Mean of the category means.
    pub overall: Scores,
}

fn mean_scores<'a>(it: impl Iterator<Item = &'a Scores>) -> Scores {
    let (mut s, mut n) = (Scores::default(), 0usize);
    for x in it {
        s.f1 += x.f1;
        s.f1_macro += x.f1_macro;
        s.accuracy += x.accuracy;
        n += 1;
    }
    let n = n.max(1) as f64;
    Scores {
        f1: s.f1 / n,
        f1_macro: s.f1_macro / n,
        accuracy: s.accuracy / n,
    }
}

/// Category means and their overall mean. Categories without variables are
/// left out of both.
pub fn build_report(variables: Vec<VariableResult>) -> Result<Summary> {
    if variables.is_empty() {
        return Err(Error::InsufficientData("a report needs at least one variable".into()));
    }
    let mut by_cat: BTreeMap<String, Vec<Scores>> = BTreeMap::new();
    for v in &variables {
        if Category::from_name(&v.category).is_none() {
            return Err(Error::Config(format!("unknown category `{}` for `{}`", v.category, v.name)));
        }
        by_cat.entry(v.category.clone()).or_default().push(v.scores);
    }
    let categories: BTreeMap<String, Scores> = by_cat.into_iter().map(|(k, v)| (k, mean_scores(v.iter()))).collect();
    let overall = mean_scores(categories.values());
    Ok(Summary {
        variables,
        categories,
        overall,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub env_id: String,
    pub dataset_hash: String,
    /// Parameter hash of the probed encoder.
    pub encoder_hash: String,
    pub encoder_seed: u64,
    pub probe_seed: u64,
    pub split_seed: u64,
    pub split_sizes: SplitSizes,
    pub dedup_replacements: usize,
    pub entropy_threshold: f64,
    pub retained: Vec<String>,
    pub pruned: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub format: String,
    pub version: u32,
    pub method: String,
    pub metadata: ReportMetadata,
    pub probe: Summary,
    pub maj_clf: Summary,
}

impl ProbeReport {
    pub fn new(method: &str, metadata: ReportMetadata, outcome: ProbeOutcome) -> Result<Self> {
        Ok(Self {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            method: method.into(),
            metadata,
            probe: build_report(outcome.probe)?,
            maj_clf: build_report(outcome.maj_clf)?,
        })
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Schema and arithmetic checks: format tag, score ranges, and category
    /// and overall means recomputed from the per-variable scores.
    pub fn validate(&self) -> Result<()> {
        if self.format != REPORT_FORMAT {
            return Err(Error::format("report", format!("format tag `{}`", self.format)));
        }
        if self.version != REPORT_VERSION {
            return Err(Error::Version {
                what: "report",
                found: self.version,
                expected: REPORT_VERSION,
            });
        }
        for (label, s) in [("probe", &self.probe), ("maj_clf", &self.maj_clf)] {
            let again = build_report(s.variables.clone())?;
            let close = |a: &Scores, b: &Scores| {
                (a.f1 - b.f1).abs() <= 1e-9
                    && (a.f1_macro - b.f1_macro).abs() <= 1e-9
                    && (a.accuracy - b.accuracy).abs() <= 1e-9
            };
            let cats_ok = again.categories.len() == s.categories.len()
                && again
                    .categories
                    .iter()
                    .all(|(k, v)| s.categories.get(k).is_some_and(|w| close(v, w)));
            if !cats_ok || !close(&again.overall, &s.overall) {
                return Err(Error::format("report", format!("{label} aggregates do not match its variables")));
            }
            for v in &s.variables {
                let sc = &v.scores;
                if ![sc.f1, sc.f1_macro, sc.accuracy, v.train_accuracy]
                    .iter()
                    .all(|x| (0.0..=1.0).contains(x))
                {
                    return Err(Error::format("report", format!("{label} score of `{}` outside [0, 1]", v.name)));
                }
            }
        }
        Ok(())
    }

    /// Flat rows `method,level,name,category,f1,f1_macro,accuracy` for both
    /// the probe and the majority classifier.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["method", "level", "name", "category", "f1", "f1_macro", "accuracy"])
            .map_err(csv_err)?;
        for (method, s) in [(self.method.as_str(), &self.probe), ("maj-clf", &self.maj_clf)] {
            let mut row = |level: &str, name: &str, cat: &str, sc: &Scores| {
                w.write_record([
                    method,
                    level,
                    name,
                    cat,
                    &sc.f1.to_string(),
                    &sc.f1_macro.to_string(),
                    &sc.accuracy.to_string(),
                ])
                .map_err(csv_err)
            };
            for v in &s.variables {
                row("variable", &v.name, &v.category, &v.scores)?;
            }
            for (c, sc) in &s.categories {
                row("category", c, c, sc)?;
            }
            row("overall", "overall", "", &s.overall)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::format("csv", e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format("csv", e.to_string())
}

/// Per-variable results for the probe and the majority classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub probe: Vec<VariableResult>,
    pub maj_clf: Vec<VariableResult>,
}

/// Raw features of the three splits, `[n, F]` each.
#[derive(Clone, Debug)]
pub struct SplitFeatures {
    pub train: Tensor<f32>,
    pub val: Tensor<f32>,
    pub test: Tensor<f32>,
}

/// Global features of every split frame. The encoder is only read.
pub fn encode_splits(encoder: &Encoder<f32>, ds: &TrajectoryDataset, split: &ProbeSplit) -> Result<SplitFeatures> {
    let enc = |frames: &[usize]| -> Result<Tensor<f32>> {
        let mut parts = Vec::new();
        for chunk in frames.chunks(256) {
            parts.push(encoder.features(&ds.frames_tensor::<f32>(chunk)?, 256)?);
        }
        if parts.is_empty() {
            return Ok(Tensor::zeros(&[0, encoder.feature_dim()]));
        }
        Tensor::concat_outer(&parts.iter().collect::<Vec<_>>())
    };
    Ok(SplitFeatures {
        train: enc(&split.train)?,
        val: enc(&split.val)?,
        test: enc(&split.test)?,
    })
}

fn column(ds: &TrajectoryDataset, frames: &[usize], v: usize) -> Vec<u8> {
    frames.iter().map(|&f| ds.labels(f)[v]).collect()
}

/// Trains one probe per retained variable (on z-scored features when
/// `cfg.standardize`) and scores it on the test split, alongside the
/// majority classifier.
pub fn probe_variables(
    ds: &TrajectoryDataset,
    split: &ProbeSplit,
    features: &SplitFeatures,
    retained: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let (tx, vx, sx) = if cfg.standardize {
        let norm = Standardizer::fit(&features.train)?;
        (norm.apply(&features.train)?, norm.apply(&features.val)?, norm.apply(&features.test)?)
    } else {
        (features.train.clone(), features.val.clone(), features.test.clone())
    };
    let mut probe = Vec::with_capacity(retained.len());
    let mut maj = Vec::with_capacity(retained.len());
    for &v in retained {
        let spec: &VariableSpec = ds
            .variables
            .get(v)
            .ok_or(Error::Index {
                op: "probe_variables",
                index: v,
                bound: ds.num_variables(),
            })?;
        let (ytr, yva, yte) = (column(ds, &split.train, v), column(ds, &split.val, v), column(ds, &split.test, v));
        let as_idx = |y: &[u8]| y.iter().map(|&l| l as usize).collect::<Vec<_>>();
        let fit = train_probe(
            &spec.name,
            (&tx, &as_idx(&ytr)),
            (&vx, &as_idx(&yva)),
            &ProbeConfig {
                seed: cfg.seed.wrapping_add(v as u64),
                ..cfg.clone()
            },
        )?;
        let category = spec.category.name().to_string();
        probe.push(VariableResult {
            name: spec.name.clone(),
            category: category.clone(),
            scores: scores(&fit.probe.predict(&sx)?, &yte)?,
            train_accuracy: scores(&fit.probe.predict(&tx)?, &ytr)?.accuracy,
        });
        let m = mode(&ytr)?;
        maj.push(VariableResult {
            name: spec.name.clone(),
            category,
            scores: maj_clf_baseline(&ytr, &yte)?,
            train_accuracy: ytr.iter().filter(|&&y| y == m).count() as f64 / ytr.len() as f64,
        });
    }
    Ok(ProbeOutcome { probe, maj_clf: maj })
}
