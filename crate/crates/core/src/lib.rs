//! Masked sinogram data blocks, a compact-prior guided diffusion transformer, and MLEM based PET
//! reconstruction, with the simulation, training and evaluation pieces around them.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the precision used in
//! production (`f32`) and in verification (`f64`).

// `!(x <= y)` style guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod phantom;
pub mod pipeline;
pub mod projection;
pub mod reconstruction;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use grid::{Grid, Image, Sinogram};
pub use numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
