//! Representation-learning objectives and the encoder training loop.

mod losses;
mod model;
mod modules;
mod train;

pub use crate::envstream::{ContrastiveBatch, SequenceBatch};
pub use losses::{
    gaussian_kl, global_local_scores, global_t_dim_terms, infonce, infonce_grid, jsd_grid, jsd_stdim_terms,
    local_local_scores, mean_squared_error, static_dim_terms, stdim_terms, summed_squared_error, supervised_terms,
    LossReport, LossTerms, PairFeatures,
};
pub use model::{cpc_terms, pair_features, Batch, Heads, MethodId, Model, ModelOptions};
pub use modules::{Aggregator, Decoder, Gru, Linear, ProbeHeads, ScoreHeads, PROBE_CLASSES};
pub use train::{evaluate, train_encoder, LabelSplit, LogRecord, Phase, TrainConfig, TrainData, Trained};
