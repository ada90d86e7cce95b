//! Budget-constrained sparse, discrete multi-agent communication.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod enforcer;
pub mod env;
pub mod error;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Policy = policy::PolicyParams<f64>;
