//! Variational transformer encoder/decoder for sequence transduction.
//!
//! The positionwise feed-forward blocks of a standard encoder/decoder
//! transformer start with a Gaussian variational linear layer sampled through
//! the local reparameterization trick. Training minimizes an epoch-weighted KL
//! complexity term plus a joint CTC / cross-entropy data term; decoding uses
//! beam search over the autoregressive decoder.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine in
//! 64-bit floats ([`graph`]).

pub mod attention;
pub mod bayes;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod featfile;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod positional;
pub mod selftest;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
