//! Spatiotemporal contrastive representation learning on small annotated
//! sprite environments, with the baselines and ablations it is compared
//! against and a linear-probing harness that scores every method against
//! ground-truth state variables.
//!
//! Layers, bottom up: [`tensor`] and [`autograd`] (a define-by-run tape with
//! f32 training and f64 gradient checks), [`encoder`], [`objectives`] (all
//! losses and the training loop), [`envstream`] (environments, datasets,
//! samplers) and [`probe`].

pub mod autograd;
pub mod checkpoint;
pub mod conv;
pub mod encoder;
pub mod envstream;
pub mod error;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod probe;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use encoder::{Encoder, EncoderConfig};
pub use envstream::{Category, CollectConfig, SpriteWorldConfig, TrajectoryDataset, VariableSpec};
pub use error::{Error, Result};
pub use objectives::{MethodId, TrainConfig};
pub use probe::{ProbeConfig, ProbeReport, Scores};
pub use tensor::{Scalar, Tensor};
