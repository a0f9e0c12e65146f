//! Spiking Tucker fusion transformer for audio-visual zero-shot
//! classification, with a small reverse-mode autodiff engine underneath.

pub mod ablation;
pub mod autograd;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod joint;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod semantic;
pub mod snn;
pub mod tensor;
pub mod train;
pub mod tucker;

pub use autograd::{Surrogate, Tape, Var};
pub use config::{JointMode, Mining, ModelConfig, SurrogateKind, ThresholdMode, TripletMode, TsfMode};
pub use data::{DataSpec, Dataset};
pub use error::{Error, Result};
pub use metrics::EvalReport;
pub use tensor::Tensor;
pub use model::Stft;
pub use train::{Checkpoint, Trainer};
