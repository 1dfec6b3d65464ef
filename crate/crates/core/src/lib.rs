pub mod error;
pub mod estimators;
pub mod expectations;
pub mod gaussian;
pub mod harness;
pub mod linalg;
pub mod moves;
pub mod problem;
pub mod student;

pub use error::{Error, Result};
