//! Physics-informed neural network pulse design for two-qubit gates.

pub mod artifacts;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod linalg;
pub mod losses;
pub mod pinn;
pub mod system;
pub mod trainer;
pub mod validator;

pub use error::{Error, Result};
