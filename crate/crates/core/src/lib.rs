pub mod error;
pub mod prosody;
pub mod tensor;

pub use error::{Error, Result};
