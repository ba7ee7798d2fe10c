pub mod buffer;
pub mod codecs;
pub mod error;
pub mod experiments;
pub mod selection;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
