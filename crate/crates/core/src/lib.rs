//! Multi-modal volume classification: a residual CNN turns every 3-slice
//! patch image into a token, and a transformer encoder fuses the tokens of
//! all modalities. Built on a small reverse-mode autodiff engine.

pub mod backbone;
pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod sequencer;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use layers::{Mode, Module};
pub use model::{ModelConfig, Scale, TransMed, Variant};
pub use preprocess::{BatchExtents, Volume, VolumeBatch};
pub use tensor::{no_grad, Float, Tensor};
pub use training::{ExperimentConfig, MetricsReport};
