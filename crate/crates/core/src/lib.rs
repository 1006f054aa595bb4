//! Desk-scale laboratory for vision-transformer tokenizers.
//!
//! The crate is generic over the element type through [`Scalar`]; use the
//! [`Tensor64`] / [`Tensor32`] aliases for concrete code.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod nn;
pub mod moto;
mod ops;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod scalar;
pub mod serialize;
pub mod shape;
pub mod tensor;
pub mod tokenizer;
pub mod tokenprop;
pub mod vit;

pub use error::{Error, Result};
pub use attention::MultiHeadAttention;
pub use gradcheck::{grad_check, GradChecker, GradReport};
pub use moto::{Moto, MotoConfig, Partition, SemanticLayout};
pub use nn::{Module, NamedParams};
pub use optim::{OptimConfig, OptimKind, Optimizer};
pub use probes::{estimate_accessibility, token_similarity, ProbeConfig, ProbeReport};
pub use rng::Rng;
pub use scalar::{DType, Scalar};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
pub use tokenizer::{PixelTokens, TokenEncoder, TokenSet, Tokenizer, TokenizerConfig, Variant};
pub use tokenprop::{Decoder, DecoderConfig, LossWeights, RecLoss};
pub use vit::{Vit, VitConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
