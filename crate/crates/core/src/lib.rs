pub mod basis;
pub mod data;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod mixed;
pub mod model;
pub mod optim;
pub mod sim;

pub use error::{Error, Result};
