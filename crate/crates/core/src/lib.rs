//! Design-based variance estimation for linear treatment-effect estimators.

pub mod bounding;
pub mod design;
pub mod error;
pub mod estimators;
pub mod fixtures;
pub mod gc;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod matrix_io;
pub mod moments;
pub mod oc;
pub mod precision;
pub mod sandwich;

pub use error::{Error, Result};
