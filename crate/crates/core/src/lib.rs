//! Persona-conditioned dialogue generation with two latent variables: a
//! Gaussian perception variable `Z_p` that carries the profile and a fader
//! `Z_α` that decides how much of it a response should use.
//!
//! The tape engine in [`tensor`] and the pure metric, KL and nucleus
//! functions are generic over the scalar type. The model and the training
//! loop run in `f64`; the aliases below name that instantiation.

pub mod corpus;
pub mod eval;
pub mod generator;
pub mod network;
pub mod objective;
pub mod tensor;
pub mod trainer;
pub mod pipeline;

#[cfg(test)]
pub(crate) mod testutil;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = tensor::Graph<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type EmbeddingTable = eval::EmbeddingTable<f64>;
