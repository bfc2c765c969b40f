pub mod autodiff;
pub mod checks;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decode;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod model;
pub mod objective;
pub mod pca;
pub mod score;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
