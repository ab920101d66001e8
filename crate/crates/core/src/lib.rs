//! Unsupervised shape transfer between an object-centric catalog domain and
//! a contextualised domain, with style-code retrieval.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`kernels`], [`graph`]: dense f64 arrays, compute kernels
//!   and reverse-mode differentiation;
//! - [`model`]: encoders, AdaIN decoders, Fit-in, discriminators;
//! - [`losses`]: every objective term and their weighted total;
//! - [`synth`]: procedural two-domain data, manifests, unpaired sampling;
//! - [`trainer`]: alternating discriminator / generator optimisation;
//! - [`metrics`]: SSIM, perceptual distance and the evaluation protocol;
//! - [`retrieval`]: style-code indexing, ranking, recall and reranking.

pub mod checkpoint;
pub mod config_file;
pub mod error;
pub mod exec;
pub mod graph;
pub mod imageio;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Result, UstError};
pub use model::{ContentCode, DecoderId, Domain, ImageBatch, MaskBatch, ModelConfig, StyleCode, UstModel};
pub use tensor::Tensor;
