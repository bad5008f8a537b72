pub mod btrank;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imaging;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod params;
pub mod spectral;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
