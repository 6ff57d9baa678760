//! Multi-head and multi-query attention in batched and incremental form,
//! with exact operation accounting, KV caches, a parameter-parity solver and
//! a small trainable encoder-decoder transformer built on the same kernels.

pub mod attention;
pub mod bench;
pub mod cost;
pub mod error;
pub mod kv_cache;
pub mod model;
pub mod reference;
pub mod tensor;
pub mod verify;

pub use attention::{AttentionDims, AttentionKind, AttentionWeights, MaskKind, MaskShape};
pub use cost::{CostBreakdown, ShapeConfig};
pub use error::{Error, Result};
pub use kv_cache::{CachePolicy, KvCache};
pub use model::{DecodeConfig, ModelConfig, ModelParams};
pub use tensor::Tensor;
