pub mod config;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod numerics;
pub mod pose;
pub mod roformer;
pub mod superpoint;
pub mod train;

pub use error::{Error, Result};
pub use nalgebra;
