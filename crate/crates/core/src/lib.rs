//! Desk-scale laboratory for backdoor fingerprints in tiny language models.
//!
//! The crate covers the full experiment loop: train a fingerprint into a
//! LoRA adapter on a base model, fuse or transfer the adapter into
//! architecturally homologous downstream checkpoints, then measure how the
//! fingerprint survives fine-tuning, structured pruning, and model merging.
//!
//! Numeric code is generic over the scalar type ([`scalar::Scalar`]);
//! checkpoints store f32, while the f64 instantiation backs the
//! finite-difference gradient checks.

pub mod attack;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod fingerprint;
pub mod lora;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeededRng;
pub use scalar::Scalar;

/// Storage-precision tensor used by checkpoints and training.
pub type Tensor32 = tensor::Tensor<f32>;
/// Wide tensor used by the gradient-check harness.
pub type Tensor64 = tensor::Tensor<f64>;

/// Version tag written into checkpoint metadata and run manifests. Bump when
/// the file formats or the pinned RNG stream change.
pub const FORMAT_VERSION: &str = "1";
