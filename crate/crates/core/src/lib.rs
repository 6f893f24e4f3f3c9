//! Federated finetuning through per-layer soft prompts.
//!
//! A server owns a full-depth transformer LM and never ships it. Clients hold
//! a shallow auxiliary model (a few global blocks executed repeatedly,
//! initialized by hidden-state distillation) and exchange only key/value
//! prefix prompts with the server, which averages them and refines them on
//! its own model.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the element type to `f64`, which the simulator and
//! its finite-difference checks use throughout.

pub mod autograd;
pub mod data;
pub mod distill;
mod error;
pub mod fed;
pub mod harness;
pub mod model;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autograd::Tensor<f64>;
pub type Tape = autograd::Tape<f64>;
pub type AdamW = autograd::AdamW<f64>;
pub type GlobalModel = model::GlobalModel<f64>;
pub type AuxModel = model::AuxModel<f64>;
pub type PromptSet = model::PromptSet<f64>;
pub type KdProjector = distill::KdProjector<f64>;

