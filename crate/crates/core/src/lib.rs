pub mod curve;
pub mod diffusion;
pub mod error;
pub mod image;
pub mod optim;
pub mod preference;
pub mod real;
pub mod registry;
pub mod synthetic;

pub use error::{Error, Result};
