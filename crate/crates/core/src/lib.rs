pub mod attacks;
pub mod checkpoint;
pub mod data;
pub mod decode;
pub mod dsp;
pub mod embed;
pub mod error;
pub mod eval;
pub mod graph;
pub mod msgcodec;
pub mod nets;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
