//! Spiking-neural-network decoding of intracortical spike-count trials.
//!
//! The decoder stacks a temporal convolution and a spatial convolution, each
//! followed by batch normalisation and a parametric leaky integrate-and-fire
//! population, then classifies the time-averaged spike rates. Training uses
//! surrogate gradients through a small reverse-mode engine ([`graph`]).
//! Hand-crafted binned-count features can be fused with the learned rates
//! ([`fusion`]), and [`energy`] estimates inference cost from MAC and
//! accumulate-only operation counts.

pub mod checkpoint;
mod codec;
pub mod data;
pub mod energy;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod model;
pub mod neurons;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
