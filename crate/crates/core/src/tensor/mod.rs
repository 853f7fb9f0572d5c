//! Dense arrays, reverse-mode autodiff and the layer primitives used by
//! every model in the crate.

mod adam;
mod array;
pub mod gradcheck;
pub mod kernels;
mod layers;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport, ParamCheck};
pub use layers::{forward, GraphSpec, LayerSpec};
pub use params::{Initializer, ParamStore, LEAKY_SLOPE};
pub use tape::{Bound, Tape, Var};

pub(crate) use tape::sigmoid;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: String, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank { op: String, expected: usize, shape: Vec<usize> },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("layer {layer}: expected {expected}, got input {got:?}")]
    Layer { layer: String, expected: String, got: Vec<usize> },
    #[error("layer {layer}: {source}")]
    InLayer {
        layer: String,
        #[source]
        source: Box<TensorError>,
    },
    #[error("{op}: batch of {n} is too small (need at least 2)")]
    BatchTooSmall { op: String, n: usize },
    #[error("cannot stack an empty list of arrays")]
    EmptyStack,
    #[error("gradient check limited to {limit} parameters, model has {count}")]
    TooManyParams { count: usize, limit: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
}
