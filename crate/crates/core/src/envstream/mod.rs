//! Annotated environments, data collection, dataset files and sampling.

mod collect;
mod dataset;
mod sample;
mod spriteworld;

pub use collect::{choose_action, collect, scripted_action, CollectConfig, Policy};
pub use dataset::{Episode, Provenance, TrajectoryDataset};
pub use sample::{
    pair_batch, sample_pair_minibatch, sample_sequence_minibatch, sequence_batch, ContrastiveBatch, PairOrigin,
    SequenceBatch, WindowSampler,
};
pub use spriteworld::{
    render, AnnotatedFrame, Category, SpriteWorld, SpriteWorldConfig, Style, VariableSpec, ACTIONS, STRIP,
};
