//! Selective state-space diffusion for multivariate time series generation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod array;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod eigen;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod permutation;
pub mod pipeline;
pub mod ssm;
pub mod train;

pub use array::{ComplexArray, DenseArray};
pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
