pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod ot;
pub mod synth;

pub use error::{Error, Result};
