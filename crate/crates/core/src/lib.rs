pub mod convattn;
pub mod data;
pub mod error;
pub mod explain;
pub mod linalg;
pub mod lmsa;
pub mod mask;
pub mod model;
pub mod verify;

pub use error::{IbitError, Result};
