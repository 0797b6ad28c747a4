pub mod dataset;
pub mod gplvm;
pub mod error;
pub mod eval;
pub mod imagecore;
pub mod linalg;
pub mod matcher;
pub mod modelio;
pub mod transcoder;

pub use error::{Error, Result};
