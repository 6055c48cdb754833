//! Speech-driven 3D facial animation toolkit.

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
