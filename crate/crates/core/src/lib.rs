pub mod bbvi;
pub mod data;
pub mod error;
pub mod eval;
pub mod expfam;
pub mod hierarchy;
pub mod math;
pub mod model;
pub mod rng;
pub mod variational;

pub use error::{DefError, Result};
