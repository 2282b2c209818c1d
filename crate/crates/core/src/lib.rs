//! Desk-scale multimodal generation lab.
//!
//! Synthetic captioned shape images are tokenized into a shared text/image
//! id space, modeled by a small transformer with a hybrid attention mask,
//! generated either token-by-token or through a rectified-flow velocity
//! field, cleaned by a re-measurement protocol, and scored with image,
//! text and retrieval metrics.

pub mod autodiff;
pub mod error;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use autodiff::{finite_diff_check, Tape, Var};
pub use error::{Error, Result};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use rng::Rng;
pub use tensor::Tensor;
pub mod data;
pub mod ppm;
pub mod tokenizer;
pub mod metrics;
pub mod params;
pub mod model;
pub mod flow;
pub mod noise;
pub mod config;
pub mod checkpoint;
pub mod pipeline;
pub mod report;
