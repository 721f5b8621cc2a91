pub mod adapters;
pub mod conflictbench;
pub mod error;
pub mod expressiveness;
pub mod numeric;
pub mod vce;

pub use error::{Error, Result};
