//! Principal Koopman eigenfunctions of nonlinear systems by path integrals
//! along trajectories.

pub mod acceptance;
pub mod cases;
pub mod dynamics;
pub mod edmd;
pub mod error;
mod linalg;
pub mod path_integral;
pub mod pipeline;
pub mod spectral;
pub mod transform;

pub use error::{Error, Result};
pub use linalg::C64;
