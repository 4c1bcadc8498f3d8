//! Temporal Normal-Inverse-Gamma image prediction.
//!
//! Given two scans of the same subject and a target time, the predictor
//! fuses per-pixel NIG evidence from multi-scale neighborhood attention
//! features and decodes the fused uncertainty triple into an image.

pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod fit;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model_io;
pub mod nig;
pub mod predictor;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use nig::{MixtureMode, NigParams, UncertaintyTriple};
pub use predictor::{ModelConfig, ModelParams, ParamMaps, Prediction, TimeSpec};
pub use tensor::{ImageTensor, Tensor3};
