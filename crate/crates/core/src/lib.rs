//! Multi-task encoder-decoder Transformer with hyper-prompt conditioning.
//!
//! A small from-scratch stack: an f64 reverse-mode [`Graph`], a T5-style
//! [`Model`], hyper-prompt generation ([`conditioning`]), the prompt-tuning
//! and adapter [`baselines`], synthetic [`data`], parameter and operation
//! [`accounting`], a training loop ([`train`]) and attention [`analysis`].

pub mod accounting;
pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Placement, Stack, Variant};
pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Batch, Model};
pub use params::{Binder, ParamStore};
pub use tensor::Tensor;
