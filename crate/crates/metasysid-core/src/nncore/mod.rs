//! Minimal differentiable-computation layer.
//!
//! Everything the meta-models need and nothing more: dense tensors, linear /
//! layer-norm / GELU / attention blocks with exact hand-derived backward
//! passes, the AdamW update, and a versioned binary parameter container.
//! Blocks are generic over [`Real`] so the gradient-check suite can run the
//! identical code in `f64`.

mod adamw;
mod attention;
mod layers;
mod paramstore;
mod real;
mod tensor;

pub use adamw::{AdamW, AdamWConfig};
pub use attention::{multi_head_attention, AttentionLayer, MaskMode, ScaledDotAttention};
pub use layers::{
    add_into, gaussian_tensor, gelu_scalar, FeedForward, Gelu, LayerNorm, Linear, Param,
    LAYER_NORM_EPS,
};
pub use paramstore::{ParamEntry, ParamStore, PARAMSTORE_MAGIC, PARAMSTORE_VERSION};
pub use real::{fast_tanh_f32, Real};
pub use tensor::{gemm, gemm_acc_lhs_t, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sequence of {len} tokens overflows the context window ({max})")]
    ContextOverflow { len: usize, max: usize },
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}
