//! Toy-scale semantic segmentation stack: a dense 4-D tensor engine with
//! reverse-mode autodiff, context-aggregation network blocks, synthetic data
//! tooling, and a full train/eval/predict pipeline.

pub mod backbone;
pub mod blocks;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use data::{SegSample, SyntheticSpec};
pub use error::{Error, Result};
pub use layers::{Fwd, Mode, ParamStore};
pub use metrics::ConfusionMatrix;
pub use network::{AblationFlags, BiCaNet, NetworkConfig};
pub use tensor::{Shape, Tape, Tensor, ValueId};
pub use train::TrainConfig;
