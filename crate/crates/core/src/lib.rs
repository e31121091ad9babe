pub mod archive;
pub mod dataio;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod image;
pub mod maps;
pub mod network;
pub mod nn;
pub mod refine;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
