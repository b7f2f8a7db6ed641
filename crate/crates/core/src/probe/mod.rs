//! Linear probing of frozen representations against ground-truth labels.

mod linear;
mod metrics;
mod report;
mod split;

pub use linear::{train_probe, LinearProbe, ProbeConfig, ProbeFit, Standardizer};
pub use metrics::{accuracy, entropy, f1_macro, f1_score, maj_clf_baseline, mode, scores, Scores};
pub use report::{
    build_report, encode_splits, probe_variables, ProbeOutcome, ProbeReport, ReportMetadata, SplitFeatures, Summary,
    VariableResult, REPORT_FORMAT, REPORT_VERSION,
};
pub use split::{make_splits, prune_low_entropy, variable_entropies, ProbeSplit, SplitSizes};
