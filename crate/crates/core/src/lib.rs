//! From-scratch GPT-2 inference with activation hooks, plus a circuit-analysis
//! toolkit for syllogistic prompts: logit-difference evaluation, mean
//! ablation, path patching, circuit faithfulness scoring, and QK/OV weight
//! analyses.

// Links the BLAS backend for ndarray's matrix products.
extern crate blas_src;

pub mod circuit;
pub mod component;
pub mod dataset;
pub mod metrics;
pub mod patching;
pub mod config;
pub mod error;
pub mod model;
pub mod safetensors;
pub mod tokenizer;
pub mod toy;
pub mod weights;

pub use component::ComponentId;
pub use config::{Activation, ModelConfig};
pub use error::{Error, Result};
pub use model::{ActivationCache, HookSite, Model, PatchValue, Replacements};
pub use tokenizer::Vocabulary;
pub use weights::{CheckpointFormat, CheckpointManifest, ModelWeights};
