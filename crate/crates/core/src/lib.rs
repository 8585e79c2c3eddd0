pub mod constraints;
pub mod error;
pub mod market;
pub mod oracle;
pub mod preferences;
pub mod solver;
pub mod verify;

pub use error::{Error, Result};
