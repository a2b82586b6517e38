pub mod dti;
pub mod error;
pub mod eval;
pub mod inference;
pub mod interp;
mod linalg;
pub mod nn;
pub mod phantom;
pub mod sh;
pub mod volume;

pub use error::{Error, Result};
