pub mod array;
pub mod data;
pub mod device;
pub mod error;
pub mod faults;
pub mod pcsa;
pub mod rng;
pub mod tnn;

pub use error::{Error, Result};
