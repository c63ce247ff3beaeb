//! Removal of a private attribute's information at the bottleneck of a
//! small neural network.
//!
//! A model is split into an encoder `F` producing the bottleneck `z`, a
//! target head `G` and a private-attribute head `H`. Each training step
//! routes three gradient streams: the weighted target loss trains `F` and
//! `G`, the private-attribute cross-entropy trains `H` only, and a
//! differentiable mutual-information proxy between `H`'s soft predictions
//! and the private labels is back-propagated through `H` into `F`, where it
//! is the only part kept.

pub mod autodiff;
pub mod datagen;
pub mod engine;
mod error;
pub mod eval;
pub mod experiment;
pub mod info;
pub mod nn;
pub mod tensor;

pub use autodiff::{check_gradients, GradCheck, Graph, NodeId};
pub use error::{Error, Result};
pub use tensor::Tensor;
