//! Low-rank adaptation for a desk-scale diffusion box detector, with the
//! tooling to run few-shot cross-domain fine-tuning experiments.

pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod lora;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
