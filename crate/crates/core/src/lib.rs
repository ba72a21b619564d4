//! Multi-query multi-head attentive statistics pooling and the AM-Softmax loss
//! with an inter-topK penalty, implemented from scratch in `f64` with analytic
//! gradients, plus the verification metrics and a desk-scale training harness.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod pooling;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GradPair, Tensor};
