pub mod ca;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluate;
mod io;
pub mod nn;
pub mod rng;
pub mod terrain;
pub mod train;
pub mod unet;

pub use error::{Error, Result};
