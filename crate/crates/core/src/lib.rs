//! Adaptive tracking control of control-affine stochastic systems with
//! online-trained deep neural networks, plus Lyapunov-based certificates.

pub mod adapt;
pub mod bench;
pub mod certify;
pub mod cli;
pub mod control;
pub mod dnn;
pub mod error;
pub mod linalg;
pub mod plot;
pub mod sde;

pub use error::{Error, Result};
