pub mod config;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod levy;
mod linalg;
pub mod model;
pub mod operators;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};
