//! Text renderings of probe reports and multi-method comparison tables.

use std::fmt::Write as _;

use stdim_core::probe::{ProbeReport, Scores, Summary};

use crate::UsageError;

/// Scores within this distance of a row's maximum are all marked best.
pub const BEST_TOLERANCE: f64 = 0.01;

/// Reference columns that are never marked best.
pub const REFERENCE_COLUMNS: [&str; 2] = ["maj-clf", "supervised"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    F1,
    F1Macro,
    Accuracy,
}

impl Metric {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "f1" => Some(Self::F1),
            "f1_macro" => Some(Self::F1Macro),
            "accuracy" => Some(Self::Accuracy),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::F1 => "f1",
            Self::F1Macro => "f1_macro",
            Self::Accuracy => "accuracy",
        }
    }

    fn of(self, s: &Scores) -> f64 {
        match self {
            Self::F1 => s.f1,
            Self::F1Macro => s.f1_macro,
            Self::Accuracy => s.accuracy,
        }
    }
}

/// Rows are variables (or categories) plus `overall`; columns are `maj-clf`
/// followed by each method in first-seen order. Reports sharing a method
/// (for example several seeds) are averaged cell by cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub metric: Metric,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
    pub best: Vec<Vec<bool>>,
}

fn cells(s: &Summary, per_category: bool, metric: Metric) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = if per_category {
        s.categories.iter().map(|(k, v)| (k.clone(), metric.of(v))).collect()
    } else {
        s.variables.iter().map(|v| (v.name.clone(), metric.of(&v.scores))).collect()
    };
    out.push(("overall".into(), metric.of(&s.overall)));
    out
}

pub fn compare(reports: &[ProbeReport], per_category: bool, metric: Metric) -> Result<Table, UsageError> {
    if reports.is_empty() {
        return Err(UsageError("report needs at least one probe report".into()));
    }
    let mut rows: Vec<String> = Vec::new();
    let mut columns: Vec<String> = vec!["maj-clf".into()];
    // (row, column) -> (sum, count)
    let mut acc: Vec<(usize, usize, f64)> = Vec::new();
    let mut add = |rows: &mut Vec<String>, col: usize, name: &str, v: f64| {
        let r = match rows.iter().position(|x| x == name) {
            Some(r) => r,
            None => {
                rows.push(name.to_string());
                rows.len() - 1
            }
        };
        acc.push((r, col, v));
    };
    for rep in reports {
        if rep.method == "maj-clf" {
            return Err(UsageError("`maj-clf` is reserved for the majority-classifier column".into()));
        }
        let col = match columns.iter().position(|c| *c == rep.method) {
            Some(c) => c,
            None => {
                columns.push(rep.method.clone());
                columns.len() - 1
            }
        };
        for (name, v) in cells(&rep.maj_clf, per_category, metric) {
            add(&mut rows, 0, &name, v);
        }
        for (name, v) in cells(&rep.probe, per_category, metric) {
            add(&mut rows, col, &name, v);
        }
    }
    // Keep `overall` last.
    if let Some(i) = rows.iter().position(|r| r == "overall") {
        let o = rows.remove(i);
        rows.push(o);
        for e in acc.iter_mut() {
            if e.0 == i {
                e.0 = rows.len() - 1;
            } else if e.0 > i {
                e.0 -= 1;
            }
        }
    }
    let mut sums = vec![vec![(0.0, 0usize); columns.len()]; rows.len()];
    for (r, c, v) in acc {
        sums[r][c].0 += v;
        sums[r][c].1 += 1;
    }
    let values: Vec<Vec<Option<f64>>> = sums
        .iter()
        .map(|row| row.iter().map(|&(s, n)| (n > 0).then(|| s / n as f64)).collect())
        .collect();
    let best = values
        .iter()
        .map(|row| {
            let eligible = |c: usize| !REFERENCE_COLUMNS.contains(&columns[c].as_str());
            let max = (0..row.len())
                .filter(|&c| eligible(c))
                .filter_map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            (0..row.len())
                .map(|c| eligible(c) && row[c].is_some_and(|v| v >= max - BEST_TOLERANCE - 1e-12))
                .collect()
        })
        .collect();
    Ok(Table {
        metric,
        rows,
        columns,
        values,
        best,
    })
}

impl Table {
    /// `row,<columns…>,best` with best methods joined by `;`.
    pub fn to_csv(&self) -> anyhow::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["row".to_string()];
        header.extend(self.columns.iter().cloned());
        header.push("best".into());
        w.write_record(&header)?;
        for (r, name) in self.rows.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend(self.values[r].iter().map(|v| v.map_or(String::new(), |x| format!("{x:.6}"))));
            let best: Vec<&str> = (0..self.columns.len())
                .filter(|&c| self.best[r][c])
                .map(|c| self.columns[c].as_str())
                .collect();
            rec.push(best.join(";"));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)?)
    }

    /// Aligned columns; `*` marks the best entries of each row.
    pub fn to_text(&self) -> String {
        let cell = |r: usize, c: usize| match self.values[r][c] {
            Some(v) => format!("{v:.3}{}", if self.best[r][c] { "*" } else { " " }),
            None => "-     ".into(),
        };
        let first = self.rows.iter().map(String::len).max().unwrap_or(0).max(3);
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|c| {
                (0..self.rows.len())
                    .map(|r| cell(r, c).len())
                    .chain([self.columns[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut s = String::new();
        let _ = write!(s, "{:<first$}", self.metric.name());
        for (c, name) in self.columns.iter().enumerate() {
            let _ = write!(s, "  {:>w$}", name, w = widths[c]);
        }
        s.push('\n');
        for (r, name) in self.rows.iter().enumerate() {
            let _ = write!(s, "{name:<first$}");
            for (c, w) in widths.iter().enumerate() {
                let _ = write!(s, "  {:>w$}", cell(r, c));
            }
            s.push('\n');
        }
        s
    }
}

/// One record per variable, then category and overall aggregates, for the
/// probe and the majority classifier side by side.
pub fn report_text(r: &ProbeReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "method {}  env {}  dataset {}", r.method, r.metadata.env_id, r.metadata.dataset_hash);
    let _ = writeln!(
        s,
        "retained {}  pruned {}",
        r.metadata.retained.join(","),
        if r.metadata.pruned.is_empty() { "-".into() } else { r.metadata.pruned.join(",") }
    );
    let w = r
        .probe
        .variables
        .iter()
        .map(|v| v.name.len())
        .chain(r.probe.categories.keys().map(String::len))
        .max()
        .unwrap_or(0)
        .max(8);
    let _ = writeln!(
        s,
        "{:<w$}  {:<22}  {:>6}  {:>8}  {:>6}  {:>9}  {:>9}",
        "name", "category", "f1", "f1_macro", "acc", "train_acc", "maj-clf f1"
    );
    for (v, m) in r.probe.variables.iter().zip(&r.maj_clf.variables) {
        let _ = writeln!(
            s,
            "{:<w$}  {:<22}  {:>6.3}  {:>8.3}  {:>6.3}  {:>9.3}  {:>9.3}",
            v.name, v.category, v.scores.f1, v.scores.f1_macro, v.scores.accuracy, v.train_accuracy, m.scores.f1
        );
    }
    for (c, sc) in &r.probe.categories {
        let m = r.maj_clf.categories.get(c).map_or(f64::NAN, |x| x.f1);
        let _ = writeln!(
            s,
            "{:<w$}  {:<22}  {:>6.3}  {:>8.3}  {:>6.3}  {:>9}  {:>9.3}",
            c, "(category)", sc.f1, sc.f1_macro, sc.accuracy, "", m
        );
    }
    let o = &r.probe.overall;
    let _ = writeln!(
        s,
        "{:<w$}  {:<22}  {:>6.3}  {:>8.3}  {:>6.3}  {:>9}  {:>9.3}",
        "overall", "", o.f1, o.f1_macro, o.accuracy, "", r.maj_clf.overall.f1
    );
    s
}
