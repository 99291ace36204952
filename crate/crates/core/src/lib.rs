pub mod error;
pub mod model;
pub mod pde;
pub mod lsmc;
pub mod boundary;
pub mod baseline;
pub mod sim;
pub mod harness;

pub use error::{Error, Result};
