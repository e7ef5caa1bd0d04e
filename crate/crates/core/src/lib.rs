//! ReLU linear attention, a toy diffusion transformer trained with
//! conditional flow matching, log-SNR expert routing, knee-point checkpoint
//! selection, and an attention scaling benchmark.

// `!(x > 0.0)` deliberately rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod bench;
pub mod blocks;
pub mod cli;
pub mod config;
pub mod error;
pub mod esgf;
pub mod flowmatch;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod snrmoe;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
