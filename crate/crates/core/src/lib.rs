//! Low-rank adapter fine-tuning for a small decoder-only transformer, with a
//! Fourier-domain penalty on the adapter weights and a clipped second-order
//! optimizer. Includes the synthetic two-language stack-machine corpus used
//! by the experiment drivers and the drivers themselves (training,
//! evaluation, optimizer comparison, penalty-strength sweeps, and spectrum
//! reports).

pub mod decode;
pub mod error;
pub mod experiments;
pub mod fft;
pub mod kernels;
pub mod lora;
pub mod model;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use lora::{LoraAdapter, LoraSet, ScalingMode, TargetPreset};
pub use model::{DecoderModel, ModelConfig};
pub use rng::Rng;
pub use spectral::FourierRegConfig;
pub use tensor::Tensor;
