//! Cross-channel, cross-time transformer for multivariate time series.
//!
//! Every (patch, channel) pair becomes a token, and attention runs over the
//! flattened token sequence with a signed, absolute-sum normalized attention
//! block carrying a learnable real-valued mask. A compressed variant keeps
//! the cost linear in the number of tokens.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod model;
pub mod profiler;
pub mod rng;
pub mod synthgen;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use tensor::{ParamSet, Parameter, Tape, Tensor, Var};
