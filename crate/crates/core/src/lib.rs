//! GroupBERT encoder building blocks with exact cost accounting.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`grouped`]: grouped linear, grouped 1-D convolution, GLU.
//! - [`model`]: BERT / GroupBERT encoder stacks, MLM and NSP heads, checkpoints.
//! - [`accounting`]: closed-form parameter and FLOP counts, pipeline batch arithmetic.
//! - [`analysis`]: attention-map averaging and normalized positional entropy.
//! - [`train`]: MLM masking, AdamW, warmup/decay schedule, the toy training loop.
//! - [`config`]: experiment configuration files and the bundled presets.
//! - [`experiment`]: complete train, evaluate and analyze runs and the ablation grid.

pub mod accounting;
pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod grouped;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
