//! Minimal dense differentiable numerics: [`Tensor2`], a recording
//! [`Tape`] with reverse-mode gradients, attention, and Adam.

mod adam;
mod attention;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use attention::{attention, grouped_self_attention, AttentionVars};
pub use params::{ParamId, ParamStore};
pub use tape::{AttentionGroup, AttentionGroups, Gradients, Tape, Var};
pub use tensor::Tensor2;

pub(crate) use tape::logsumexp;
pub(crate) use tensor::dot;
