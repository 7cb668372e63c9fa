//! Conformation autoencoder: molecular graphs, internal coordinates, graph
//! encoders, a VAE over conformations and latent-space optimization.

pub mod codec;
pub mod datagen;
pub mod error;
pub mod geom;
pub mod gnn;
pub mod molgraph;
pub mod nn;
pub mod optimize;
pub mod parallel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
