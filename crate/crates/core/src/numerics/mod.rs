//! Tensors, a reverse-mode tape, the layer set, AdamW and gradient checking.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{ConvParams, Graph, NodeId};
pub use layers::{forward, same_padding, LayerKind, LayerSpec, LAYER_NORM_EPS};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use params::{fnv1a, uniform_init, Binder, ParamStore};
pub use tensor::{Real, Tensor};

#[allow(unused_imports)]
pub(crate) use graph::{hann, reflect_index};
