//! Switching nonparametric regression.
//!
//! A single series `y_i = f_{z_i}(x_i) + σ_{z_i} ε_i` switches among `J`
//! smooth regime functions according to a latent iid or Markov process.
//! The regime functions are fitted either as penalized cubic B-splines or
//! as Gaussian-process posterior means, by an EM/ECM loop.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod basis;
pub mod engine;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod louis;
pub mod model;
pub mod mstep;
pub mod sim;

pub use error::{Error, Result};
