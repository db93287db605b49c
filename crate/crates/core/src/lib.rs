//! Hypercomplex residual networks: quaternion and vectormap convolutional
//! frontends with real or PHM (parameterized hypercomplex multiplication)
//! dense backends.

pub mod algebra;
pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod layers;
pub mod models;
pub mod oracle;
pub mod params;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Mode, Precision, Real, Tensor};
