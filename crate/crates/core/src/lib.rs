//! Cross-attention draft heads for speculative decoding.
//!
//! The crate is generic over the scalar type; `f32` is used for training and
//! inference, `f64` for gradient checks. Aliases for both are exported here.

pub mod analysis;
pub mod data;
pub mod error;
pub mod masks;
pub mod models;
pub mod scalar;
pub mod specdec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type TargetModel32 = models::TargetModel<f32>;
pub type TargetModel64 = models::TargetModel<f64>;
pub type DraftHead32 = models::DraftHead<f32>;
pub type DraftHead64 = models::DraftHead<f64>;
pub type KvCache32 = models::KvCache<f32>;
